//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use hpcg::autodiff::{NodeId, Tape};
use hpcg::codec::Codec;
use hpcg::nn::LayoutBuilder;
use hpcg::octree::VoxelCoord;
use hpcg::pretrained::{build_assets, AssetRecipe, ToyCorpus};
use hpcg::tensor::{Activation, CoordSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Codec with assets pretrained on the default toy corpus; built once per process.
pub fn toy_codec() -> &'static Codec {
    static CODEC: OnceLock<Codec> = OnceLock::new();
    CODEC.get_or_init(|| {
        let clouds = ToyCorpus::default().generate().expect("toy corpus");
        let (assets, _) = build_assets(&clouds, &AssetRecipe::toy()).expect("toy assets");
        Codec::new(assets).expect("codec")
    })
}

/// Very small assets for fast tests and fixtures.
pub fn tiny_recipe() -> (ToyCorpus, AssetRecipe) {
    let corpus = ToyCorpus {
        clouds: 6,
        bitdepth: 5,
        radius: 6.0,
        seed: 3,
    };
    let mut recipe = AssetRecipe::toy();
    recipe.ppn.channels = 4;
    recipe.dar.channels = 4;
    recipe.pretrain.epochs = 2;
    recipe.base.epochs = 2;
    (corpus, recipe)
}

pub fn tiny_codec() -> &'static Codec {
    static CODEC: OnceLock<Codec> = OnceLock::new();
    CODEC.get_or_init(|| {
        let (corpus, recipe) = tiny_recipe();
        let (assets, _) = build_assets(&corpus.generate().unwrap(), &recipe).unwrap();
        Codec::new(assets).unwrap()
    })
}

// ---------------------------------------------------------------------------
// Finite-difference checks of the tape.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOp {
    SConv,
    Linear,
    Act(Activation),
    Add,
    Concat,
    ScaleRows,
    BceBits,
    Sum,
    WeightedSum,
}

pub const GRAD_OPS: [GradOp; 12] = [
    GradOp::SConv,
    GradOp::Linear,
    GradOp::Act(Activation::Sigmoid),
    GradOp::Act(Activation::Softplus),
    GradOp::Act(Activation::Tanh),
    GradOp::Act(Activation::Relu),
    GradOp::Add,
    GradOp::Concat,
    GradOp::ScaleRows,
    GradOp::BceBits,
    GradOp::Sum,
    GradOp::WeightedSum,
];

/// One randomized graph exercising a single op under test, read out to a scalar.
struct Instance {
    op: GradOp,
    coords: Arc<CoordSet>,
    cin: usize,
    // Two input tensors (the second is used by binary ops).
    inputs: [Vec<f64>; 2],
    params: Vec<f64>,
    conv: hpcg::nn::ConvParam,
    lin: hpcg::nn::LinearParam,
    readout: hpcg::nn::LinearParam,
    row_scale: Vec<f64>,
    targets: Vec<u8>,
    weights: Vec<f64>,
}

impl Instance {
    fn random(op: GradOp, rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(3..10);
        let mut pts: Vec<VoxelCoord> = (0..n)
            .map(|_| VoxelCoord::new(rng.random_range(0..4), rng.random_range(0..4), rng.random_range(0..4)))
            .collect();
        pts.sort();
        pts.dedup();
        let coords = Arc::new(CoordSet::new(pts));
        let rows = coords.len();
        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..4);
        let mut lb = LayoutBuilder::new();
        let conv = lb.conv("conv", cin, cout);
        let lin = lb.linear("lin", cin, cout);
        // Readout width matches the op output width.
        let out_cols = match op {
            GradOp::SConv | GradOp::Linear => cout,
            GradOp::Concat => 2 * cin,
            _ => cin,
        };
        let readout = lb.linear("readout", out_cols, 1);
        let layout = lb.finish();
        let params = (0..layout.len()).map(|_| rng.random_range(-0.8..0.8)).collect();
        let mut input = || -> Vec<f64> {
            (0..rows * cin)
                .map(|_| loop {
                    let v: f64 = rng.random_range(-2.0..2.0);
                    // Keep clear of the relu kink so central differences are valid.
                    if v.abs() > 0.05 {
                        break if op == GradOp::Act(Activation::Softplus) && rng.random::<f64>() < 0.2 {
                            v * 20.0
                        } else {
                            v
                        };
                    }
                })
                .collect()
        };
        let inputs = [input(), input()];
        Self {
            op,
            cin,
            inputs,
            params,
            conv,
            lin,
            readout,
            row_scale: (0..rows).map(|_| rng.random_range(-1.5..1.5)).collect(),
            targets: (0..rows * cin).map(|_| rng.random_range(0..2)).collect(),
            weights: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            coords,
        }
    }

    /// Records the graph; returns (loss, input node ids).
    fn build(&self, tape: &mut Tape<'_>, inputs: &[Vec<f64>; 2]) -> (NodeId, [NodeId; 2]) {
        let a = tape.input(&self.coords, self.cin, inputs[0].clone()).unwrap();
        let b = tape.input(&self.coords, self.cin, inputs[1].clone()).unwrap();
        let tensor_out = |tape: &mut Tape<'_>| -> Option<NodeId> {
            Some(match self.op {
                GradOp::SConv => tape.sconv(a, &self.conv).unwrap(),
                GradOp::Linear => tape.linear(a, &self.lin).unwrap(),
                GradOp::Act(kind) => tape.act(kind, a),
                GradOp::Add => tape.add(a, b).unwrap(),
                GradOp::Concat => tape.concat(a, b).unwrap(),
                GradOp::ScaleRows => tape.scale_rows(a, &self.row_scale).unwrap(),
                _ => return None,
            })
        };
        let loss = match tensor_out(tape) {
            Some(y) => {
                let r = tape.linear(y, &self.readout).unwrap();
                let t = tape.act(Activation::Tanh, r);
                tape.sum(t)
            }
            None => match self.op {
                GradOp::BceBits => {
                    let r = tape.linear(a, &self.readout).unwrap();
                    let p = tape.act(Activation::Sigmoid, r);
                    tape.bce_bits(p, &self.targets[..self.coords.len()]).unwrap()
                }
                GradOp::Sum => {
                    let t = tape.act(Activation::Tanh, a);
                    tape.sum(t)
                }
                GradOp::WeightedSum => {
                    let s1 = tape.sum(a);
                    let t = tape.act(Activation::Sigmoid, b);
                    let s2 = tape.sum(t);
                    let s3 = tape.sum(b);
                    tape.weighted_sum(&[(s1, self.weights[0]), (s2, self.weights[1]), (s3, self.weights[2])])
                        .unwrap()
                }
                _ => unreachable!(),
            },
        };
        (loss, [a, b])
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub instances: usize,
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Relative error with a small absolute floor for near-zero derivatives.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences (h = 1e-5) against the tape for every parameter and
/// input element of `per_op` random instances of each op.
pub fn gradcheck_ops(per_op: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut rep = GradReport::default();
    for op in GRAD_OPS {
        for _ in 0..per_op {
            let inst = Instance::random(op, &mut rng);
            let loss_at = |params: &[f64], inputs: &[Vec<f64>; 2]| {
                let mut tape = Tape::new(params);
                let (l, _) = inst.build(&mut tape, inputs);
                tape.scalar(l)
            };
            let mut tape = Tape::new(&inst.params);
            let (loss, ids) = inst.build(&mut tape, &inst.inputs);
            let g = tape.backward(loss).unwrap();
            let mut record = |a: f64, n: f64, what: String| {
                let r = rel_err(a, n);
                rep.checked += 1;
                if r > rep.max_rel {
                    rep.max_rel = r;
                    rep.worst = format!("{op:?} {what}: analytic {a:e} numeric {n:e}");
                }
            };
            for k in 0..inst.params.len() {
                let (mut p, mut m) = (inst.params.clone(), inst.params.clone());
                p[k] += h;
                m[k] -= h;
                let num = (loss_at(&p, &inst.inputs) - loss_at(&m, &inst.inputs)) / (2.0 * h);
                record(g.params[k], num, format!("param {k}"));
            }
            for (s, id) in ids.iter().enumerate() {
                let ga = g.node(*id).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; inst.inputs[s].len()]);
                for k in 0..inst.inputs[s].len() {
                    let (mut p, mut m) = (inst.inputs.clone(), inst.inputs.clone());
                    p[s][k] += h;
                    m[s][k] -= h;
                    let num = (loss_at(&inst.params, &p) - loss_at(&inst.params, &m)) / (2.0 * h);
                    record(ga[k], num, format!("input {s}[{k}]"));
                }
            }
            rep.instances += 1;
        }
    }
    rep
}

/// Central differences on a sample of parameters of the composed networks:
/// prior-network pretraining loss and refiner frame bits on a small cloud.
pub fn gradcheck_networks(samples: usize, seed: u64) -> GradReport {
    use hpcg::dar::{Dar, DarConfig};
    use hpcg::octree::build_hierarchy;
    use hpcg::ppn::{Ppn, PpnConfig, PriorCache};
    use hpcg::synth::random_cloud;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut rep = GradReport::default();
    let pc = random_cloud(&mut rng, 60, 4).unwrap();
    let hier = build_hierarchy(&pc, 4).unwrap();
    let ppn = Ppn::new(PpnConfig { blocks: 1, channels: 4 }).unwrap();
    let dar = Dar::new(DarConfig { blocks: 1, channels: 4 }).unwrap();
    // Jitter keeps relu inputs off exact zeros (zero biases on all-zero rows
    // would otherwise sit on the kink).
    let mut jittered = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x + rng.random_range(-0.1..0.1)).collect() };
    let ppn_params = jittered(ppn.layout().init(&mut ChaCha8Rng::seed_from_u64(seed + 1)));
    let dar_params = jittered(dar.layout().init(&mut ChaCha8Rng::seed_from_u64(seed + 2)));
    let priors = PriorCache::compute(&ppn, &ppn_params, &hier).unwrap();

    type LossFn<'a> = Box<dyn Fn(&mut Tape<'_>) -> NodeId + 'a>;
    let cases: Vec<(&str, Vec<f64>, LossFn)> = vec![
        ("ppn pretrain loss", ppn_params.clone(), Box::new(|t: &mut Tape<'_>| ppn.pretrain_loss(t, &hier).unwrap())),
        (
            "dar frame bits",
            dar_params.clone(),
            Box::new(|t: &mut Tape<'_>| dar.frame_bits_tape(t, &hier, &priors).unwrap()),
        ),
    ];
    for (name, params, f) in &cases {
        let mut tape = Tape::new(params);
        let l = f(&mut tape);
        let g = tape.backward(l).unwrap();
        for _ in 0..samples {
            let k = rng.random_range(0..params.len());
            let eval = |p: &[f64]| {
                let mut t = Tape::new(p);
                let l = f(&mut t);
                t.scalar(l)
            };
            let (mut p, mut m) = (params.clone(), params.clone());
            p[k] += h;
            m[k] -= h;
            let num = (eval(&p) - eval(&m)) / (2.0 * h);
            let r = rel_err(g.params[k], num);
            rep.checked += 1;
            if r > rep.max_rel {
                rep.max_rel = r;
                rep.worst = format!("{name} param {k}: analytic {:e} numeric {num:e}", g.params[k]);
            }
        }
        rep.instances += 1;
    }
    rep
}
