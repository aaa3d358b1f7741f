use dass::config::SearchConfig;
use dass::genotype::{instantiate, Genotype};
use dass::nn::Ctx;
use dass::rng::RunRng;
use dass::space::{NetConfig, Network, OpKind, OperationSet, Supernet};
use dass::sparse::ForwardMode;
use dass::tensor::{KindSet, ParamKind, Tape, Tensor};

const FIXTURE: &str = include_str!("fixtures/desk_genotype.json");

fn fixture() -> Genotype {
    Genotype::from_json(FIXTURE).unwrap()
}

fn logits(net: &mut dyn Network, x: &Tensor, mode: ForwardMode, train: bool) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, mode, train, KindSet::NONE);
    let xv = ctx.tape.constant(x.clone()).unwrap();
    let out = net.forward(&mut ctx, xv).unwrap();
    let cells = out.cell_outputs.iter().map(|v| tape.value(*v).clone()).collect();
    (tape.value(out.logits).clone(), cells)
}

fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Architecture table that puts all weight on the fixture's ops and the zero
/// op everywhere else.
fn one_hot_table(pairs: &[(OpKind, usize)], ops: &OperationSet, n_intermediate: usize) -> Tensor {
    let zero = ops.index_of(OpKind::Zero).unwrap();
    let mut rows = Vec::new();
    for i in 0..n_intermediate {
        let node = i + 2;
        for src in 0..node {
            let chosen = pairs[2 * i..2 * i + 2]
                .iter()
                .find(|(_, s)| *s == src)
                .map(|(op, _)| ops.index_of(*op).unwrap())
                .unwrap_or(zero);
            rows.extend((0..ops.len()).map(|o| if o == chosen { 0.0 } else { -1e4 }));
        }
    }
    Tensor::new(vec![rows.len() / ops.len(), ops.len()], rows).unwrap()
}

#[test]
fn fixture_parses_and_names_ops() {
    let g = fixture();
    assert_eq!(g.normal[0], (OpKind::SepConv3, 0));
    assert_eq!(g.reduce[1], (OpKind::SepConv5, 1));
    assert_eq!(g.n_intermediate(), 2);
    assert!(FIXTURE.contains("sep_sparse_conv_3x3"));
    let again = Genotype::from_json(&g.to_json().unwrap()).unwrap();
    assert_eq!(again, g);
}

#[test]
fn malformed_genotypes_are_rejected() {
    let cyclic = FIXTURE.replace("[\"max_pool_3x3\", 2]", "[\"max_pool_3x3\", 3]");
    assert!(Genotype::from_json(&cyclic).is_err());
    let unknown = FIXTURE.replace("skip_connect", "skip_connection");
    assert!(Genotype::from_json(&unknown).is_err());
    let truncated = &FIXTURE[..FIXTURE.len() / 2];
    assert!(Genotype::from_json(truncated).is_err());
}

#[test]
fn fixture_instantiates_at_desk_scale() {
    let cfg = SearchConfig::desk().net();
    let g = fixture();
    let mut net = instantiate(&g, &cfg, None, &mut RunRng::new(1)).unwrap();
    let masked: usize = net.sparse_params().iter().map(|p| p.numel(net.store())).sum();
    assert_eq!(masked, g.sparse_numel(&cfg));
    let x = Tensor::ones(&[3, 3, cfg.image_size, cfg.image_size]);
    let (y, cells) = logits(&mut net, &x, ForwardMode::Dense, false);
    assert_eq!(y.shape(), &[3, cfg.num_classes]);
    assert_eq!(cells.len(), cfg.n_cells);
    assert!(y.all_finite());
}

/// With all architecture weight on the retained ops, the supernet computes the
/// same function as the network instantiated from the genotype with inherited
/// tensors.
#[test]
fn one_hot_supernet_matches_instantiated_network() {
    let cfg = NetConfig {
        image_size: 8,
        n_cells: 3,
        n_nodes: 5,
        init_channels: 4,
        include_zero_op: true,
        ..NetConfig::default()
    };
    let g = fixture();
    let mut rng = RunRng::new(5);
    let mut sup = Supernet::new(&cfg, &mut rng).unwrap();
    let ops = sup.op_set.clone();
    *sup.store.value_mut(sup.alpha_normal) = one_hot_table(&g.normal, &ops, 2);
    *sup.store.value_mut(sup.alpha_reduce) = one_hot_table(&g.reduce, &ops, 2);
    // random scores and a 30% mask on every sparse layer
    let ids: Vec<_> = sup.sparse_params().iter().map(|p| (p.scores, p.numel(&sup.store))).collect();
    for (sid, _) in &ids {
        for v in sup.store.value_mut(*sid).data_mut() {
            *v = rng.normal(0.0, 1.0);
        }
    }
    for p in sup.sparse_params_mut() {
        p.k = (p.k as f64 * 0.3).round() as usize;
    }
    let params: Vec<_> = sup.sparse_params().into_iter().cloned().collect();
    for p in &params {
        p.rebinarize(&mut sup.store).unwrap();
    }
    let mut net = instantiate(&g, &cfg, Some(&sup.store), &mut RunRng::new(99)).unwrap();
    let x = {
        let mut r = RunRng::new(11);
        Tensor::new(vec![4, 3, 8, 8], (0..4 * 3 * 64).map(|_| r.normal(0.0, 1.0)).collect()).unwrap()
    };
    for mode in [ForwardMode::Dense, ForwardMode::ScoreScaled, ForwardMode::Masked] {
        for train in [false, true] {
            let (ys, cs) = logits(&mut sup, &x, mode, train);
            let (yd, cd) = logits(&mut net, &x, mode, train);
            assert!(max_diff(&ys, &yd) < 1e-5, "{mode:?} train={train}: {}", max_diff(&ys, &yd));
            for (a, b) in cs.iter().zip(&cd) {
                assert!(max_diff(a, b) < 1e-5, "{mode:?} train={train}");
            }
        }
    }
    // inherited masks are the supernet's, layer by layer
    for p in net.sparse_params() {
        let src = sup.store.id(&format!("{}.mask", p.name)).unwrap();
        assert_eq!(net.store().value(p.mask), sup.store.value(src));
    }
    assert_eq!(
        net.store().numel_of(KindSet::of(&[ParamKind::Alpha])),
        0,
        "derived networks carry no architecture tables"
    );
}
