//! Finite-difference gradient checking shared by the gradient and
//! acceptance suites.
#![allow(dead_code)]

use pgr_core::backbone::{fuse_windows_var, WindowBox};
use pgr_core::htk::expand_scores_var;
use pgr_core::network::{loss_var, Mode, NetConfig, Path, PgrNet};
use pgr_core::numerics::{Graph, ParamStore, Tape, Tensor, Var};
use pgr_core::prior::RoiPrior;
use pgr_core::retention::{gamma_schedule, retention_head, RetentionBlock};
use pgr_core::wings::{guidance_var, hard_lock_var, modulate_var};
use pgr_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;
const MAX_PROBES: usize = 40;
/// Network probes shift thousands of ReLU pre-activations at once, so a
/// step of 1e-3 regularly straddles a kink. f64 leaves room for a finer step.
pub const H_NET: f64 = 1e-6;

/// Relative error with a small floor so near-zero gradients are compared
/// absolutely at the same scale.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

/// Values bounded away from zero, for kinks and reciprocals.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One differentiable op with an input generator.
pub struct OpCase {
    pub name: &'static str,
    pub group: &'static str,
    gen: Gen,
    build: Build,
}

fn case(
    group: &'static str,
    name: &'static str,
    gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        group,
        gen: Box::new(gen),
        build: Box::new(build),
    }
}

fn scalar_loss(
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    weights: &mut Option<Tensor>,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<(f64, Tape, Var, Vec<Var>), String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).map_err(|e| e.to_string())?;
    let loss = if tape.value(out).numel() == 1 {
        out
    } else {
        let w = weights
            .get_or_insert_with(|| normal(rng, tape.shape(out)))
            .clone();
        let w = tape.constant(w);
        let p = tape.mul(out, w).map_err(|e| e.to_string())?;
        tape.sum(p).map_err(|e| e.to_string())?
    };
    Ok((tape.value(loss).item(), tape, loss, vars))
}

impl OpCase {
    /// Checks every input over `SEEDS` draws; returns the number of probes.
    pub fn check(&self) -> std::result::Result<usize, String> {
        let mut probes_run = 0;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (self.gen)(&mut rng);
            let mut weights = None;
            let (_, tape, loss, vars) = scalar_loss(&*self.build, &inputs, &mut weights, &mut rng)?;
            let grads = tape.backward(loss).map_err(|e| e.to_string())?;
            for (i, input) in inputs.iter().enumerate() {
                let analytic = grads.get_or_zeros(vars[i], input.shape());
                let n = input.numel();
                let probes: Vec<usize> = if n <= MAX_PROBES {
                    (0..n).collect()
                } else {
                    (0..MAX_PROBES).map(|_| rng.random_range(0..n)).collect()
                };
                for j in probes {
                    let mut plus = inputs.to_vec();
                    plus[i].data_mut()[j] += H;
                    let mut minus = inputs.to_vec();
                    minus[i].data_mut()[j] -= H;
                    let lp = scalar_loss(&*self.build, &plus, &mut weights, &mut rng)?.0;
                    let lm = scalar_loss(&*self.build, &minus, &mut weights, &mut rng)?.0;
                    let numeric = (lp - lm) / (2.0 * H);
                    let a = analytic.data()[j];
                    if rel_err(a, numeric) > TOL {
                        return Err(format!(
                            "{} seed {seed} input {i} elem {j}: analytic {a} numeric {numeric}",
                            self.name
                        ));
                    }
                    probes_run += 1;
                }
            }
        }
        Ok(probes_run)
    }
}

fn unit_templates(k: usize, h: usize, w: usize) -> Vec<Tensor> {
    (0..k)
        .map(|i| {
            let d = (0..h * w)
                .map(|p| {
                    let (y, x) = ((p / w) as f64, (p % w) as f64);
                    (-((y - i as f64).powi(2) + (x - 1.5).powi(2)) / 4.0).exp()
                })
                .collect();
            Tensor::new(vec![h, w], d).unwrap()
        })
        .collect()
}

fn binary_target(shape: &[usize], on: impl Fn(usize) -> bool) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| f64::from(u8::from(on(i)))).collect()).unwrap()
}

/// Every differentiable op of the tape plus the composite ROI ops.
pub fn op_cases() -> Vec<OpCase> {
    let disk = binary_target(&[5, 4], |p| p % 4 > 0 && p / 4 < 3);
    let boxes = [
        WindowBox { y0: 0, x0: 0, side: 3 },
        WindowBox { y0: 1, x0: 2, side: 3 },
    ];
    vec![
        case("arithmetic", "matmul", |r| vec![normal(r, &[3, 4]), normal(r, &[4, 5])], |t, v| t.matmul(v[0], v[1])),
        case("arithmetic", "add", |r| vec![normal(r, &[2, 3]), normal(r, &[2, 3])], |t, v| t.add(v[0], v[1])),
        case("arithmetic", "add_broadcast", |r| vec![normal(r, &[2, 3]), normal(r, &[1])], |t, v| t.add(v[0], v[1])),
        case("arithmetic", "sub", |r| vec![normal(r, &[1]), normal(r, &[4])], |t, v| t.sub(v[0], v[1])),
        case("arithmetic", "mul", |r| vec![normal(r, &[5]), normal(r, &[5])], |t, v| t.mul(v[0], v[1])),
        case("arithmetic", "mul_broadcast", |r| vec![normal(r, &[1]), normal(r, &[2, 2])], |t, v| t.mul(v[0], v[1])),
        case("arithmetic", "div", |r| vec![normal(r, &[6]), away_from_zero(r, &[6])], |t, v| t.div(v[0], v[1])),
        case("arithmetic", "div_broadcast", |r| vec![normal(r, &[6]), away_from_zero(r, &[1])], |t, v| t.div(v[0], v[1])),
        case("arithmetic", "scale", |r| vec![normal(r, &[3, 3])], |t, v| t.scale(v[0], -1.7)),
        case("arithmetic", "add_scalar", |r| vec![normal(r, &[3])], |t, v| t.add_scalar(v[0], 0.4)),
        case("elementwise", "exp", |r| vec![normal(r, &[8])], |t, v| t.exp(v[0])),
        case("elementwise", "sigmoid", |r| vec![normal(r, &[8])], |t, v| t.sigmoid(v[0])),
        case("elementwise", "relu", |r| vec![away_from_zero(r, &[12])], |t, v| t.relu(v[0])),
        case("elementwise", "recip", |r| vec![away_from_zero(r, &[6])], |t, v| t.recip(v[0])),
        case("reduction", "softmax", |r| vec![normal(r, &[3, 5])], |t, v| t.softmax(v[0])),
        case("reduction", "sum", |r| vec![normal(r, &[3, 5])], |t, v| t.sum(v[0])),
        case("reduction", "mean", |r| vec![normal(r, &[3, 5])], |t, v| t.mean(v[0])),
        case("reduction", "transpose", |r| vec![normal(r, &[3, 5])], |t, v| t.transpose(v[0])),
        case("reduction", "reshape", |r| vec![normal(r, &[3, 4])], |t, v| t.reshape(v[0], &[2, 6])),
        case("reduction", "concat", |r| vec![normal(r, &[2, 3, 3]), normal(r, &[1, 3, 3])], |t, v| t.concat(&[v[0], v[1]])),
        case("reduction", "gather", |r| vec![normal(r, &[2, 4])], |t, v| t.gather(v[0], &[7, 0, 3, 3])),
        case("reduction", "scatter", |r| vec![normal(r, &[3])], |t, v| t.scatter(v[0], &[4, 1, 4], 6)),
        case("reduction", "add_row", |r| vec![normal(r, &[4, 3]), normal(r, &[3])], |t, v| t.add_row(v[0], v[1])),
        case(
            "reduction",
            "layer_norm",
            |r| vec![normal(r, &[4, 6]), normal(r, &[6]), normal(r, &[6])],
            |t, v| t.layer_norm(v[0], v[1], v[2]),
        ),
        case(
            "spatial",
            "conv2d_pad1",
            |r| vec![normal(r, &[2, 6, 6]), normal(r, &[3, 2, 3, 3]), normal(r, &[3])],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        case(
            "spatial",
            "conv2d_stride2",
            |r| vec![normal(r, &[2, 7, 7]), normal(r, &[2, 2, 3, 3])],
            |t, v| t.conv2d(v[0], v[1], None, 2, 0),
        ),
        case(
            "spatial",
            "conv2d_1x1",
            |r| vec![normal(r, &[3, 4, 4]), normal(r, &[2, 3, 1, 1]), normal(r, &[2])],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
        ),
        case("spatial", "avgpool2x2", |r| vec![normal(r, &[2, 6, 4])], |t, v| t.avgpool2x2(v[0])),
        case("spatial", "upsample2x", |r| vec![normal(r, &[2, 3, 2])], |t, v| t.upsample2x(v[0])),
        case(
            "spatial",
            "mul_spatial",
            |r| vec![normal(r, &[3, 4, 5]), normal(r, &[4, 5])],
            |t, v| t.mul_spatial(v[0], v[1]),
        ),
        case("spatial", "crop", |r| vec![normal(r, &[2, 6, 6])], |t, v| t.crop(v[0], 1, 2, 3, 4)),
        case("spatial", "paste", |r| vec![normal(r, &[2, 3, 2])], |t, v| t.paste(v[0], 2, 1, 6, 5)),
        case("spatial", "spatial_mean", |r| vec![normal(r, &[3, 4, 4])], |t, v| t.spatial_mean(v[0])),
        case("loss", "bce_with_logits", |r| vec![normal(r, &[2, 4, 4])], |t, v| {
            t.bce_with_logits(v[0], &binary_target(&[2, 4, 4], |i| i % 3 == 0))
        }),
        case("loss", "segmentation_loss", |r| vec![normal(r, &[1, 6, 6])], |t, v| {
            let target = binary_target(&[1, 6, 6], |i| (i / 6) % 2 == 0 && i % 6 > 1);
            loss_var(t, v[0], &target, 0.2, 0.8)
        }),
        case("roi", "guidance", |r| vec![normal(r, &[3])], |t, v| {
            guidance_var(t, v[0], &unit_templates(3, 5, 4), 1e-6)
        }),
        case(
            "roi",
            "modulate",
            |r| vec![normal(r, &[2, 5, 4]), normal(r, &[5, 4])],
            |t, v| modulate_var(t, v[0], v[1], 0.8),
        ),
        case(
            "roi",
            "hard_lock",
            |r| vec![normal(r, &[2, 5, 4]), normal(r, &[5, 4])],
            move |t, v| hard_lock_var(t, v[0], v[1], &disk, 1.0),
        ),
        case(
            "roi",
            "retention_head",
            |r| vec![normal(r, &[6, 4]), normal(r, &[4, 3]), normal(r, &[4, 3]), normal(r, &[4, 3])],
            |t, v| retention_head(t, v[0], v[1], v[2], v[3], 0.9),
        ),
        case(
            "roi",
            "fuse_windows",
            |r| vec![normal(r, &[2, 3, 3]), normal(r, &[2, 3, 3]), normal(r, &[2]), normal(r, &[2, 5, 6])],
            move |t, v| fuse_windows_var(t, &[v[0], v[1]], &boxes, v[2], 5.0, v[3]),
        ),
        case("roi", "expand_scores", |r| vec![normal(r, &[2])], |t, v| expand_scores_var(t, v[0], &[3, 0], 4)),
    ]
}

/// Leading parameters of a retention block (n=9, d=4) over `SEEDS` seeds.
pub fn check_retention_block() -> std::result::Result<usize, String> {
    let mut probes = 0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = RetentionBlock::new(&mut store, "b", 4, &gamma_schedule(2), &mut rng, false)
            .map_err(|e| e.to_string())?;
        let x = normal(&mut rng, &[9, 4]);
        let w = normal(&mut rng, &[9, 4]);
        let eval = |store: &ParamStore| -> (Graph, Var) {
            let mut g = Graph::bind(store);
            let xv = g.tape.constant(x.clone());
            let y = block.forward(&mut g, xv).unwrap();
            let wv = g.tape.constant(w.clone());
            let p = g.tape.mul(y, wv).unwrap();
            let l = g.tape.sum(p).unwrap();
            (g, l)
        };
        let (g, l) = eval(&store);
        let vars = g.param_vars().to_vec();
        let grads = g.tape.backward(l).map_err(|e| e.to_string())?;
        let ids: Vec<_> = store.ids().collect();
        for (t, &id) in ids.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[t], store.get(id).shape());
            for j in 0..store.get(id).numel().min(6) {
                let orig = store.get(id).data()[j];
                store.get_mut(id).data_mut()[j] = orig + H_NET;
                let (gp, lp) = eval(&store);
                store.get_mut(id).data_mut()[j] = orig - H_NET;
                let (gm, lm) = eval(&store);
                store.get_mut(id).data_mut()[j] = orig;
                let numeric = (gp.tape.value(lp).item() - gm.tape.value(lm).item()) / (2.0 * H_NET);
                let a = analytic.data()[j];
                if rel_err(a, numeric) > TOL {
                    return Err(format!("{} [{j}] seed {seed}: analytic {a} numeric {numeric}", store.name(id)));
                }
                probes += 1;
            }
        }
    }
    Ok(probes)
}

pub fn toy_priors() -> Vec<RoiPrior> {
    vec![
        RoiPrior { r: 0.3, cx: 0.35, cy: 0.4, peak_size: 10, support: 5 },
        RoiPrior { r: 0.45, cx: 0.6, cy: 0.55, peak_size: 14, support: 5 },
    ]
}

fn toy_input(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = normal(&mut rng, &[1, 32, 32]);
    let target = binary_target(&[1, 32, 32], |p| {
        let (y, x) = ((p / 32) as f64 - 13.0, (p % 32) as f64 - 18.0);
        y * y + x * x < 30.0
    });
    (image, target)
}

fn net_loss(net: &PgrNet, image: &Tensor, target: &Tensor, mode: Mode) -> f64 {
    let mut g = Graph::bind(&net.store);
    let out = net.forward(&mut g, image, mode).unwrap();
    let l = loss_var(&mut g.tape, out.logits, target, 0.2, 0.8).unwrap();
    g.tape.value(l).item()
}

/// Full 32×32 forward and loss: probes `probes` parameters, visiting every
/// tensor in turn, and returns how many carried a non-zero gradient.
///
/// Zero-initialised biases put dead ReLU rows exactly on their kink, so
/// every parameter is jittered first to move to a differentiable point.
pub fn check_network(
    mut net: PgrNet,
    mode: Mode,
    expect: Path,
    probes: usize,
    seed: u64,
) -> std::result::Result<usize, String> {
    let (image, target) = toy_input(seed);
    let mut jitter = ChaCha8Rng::seed_from_u64(seed + 50);
    let all: Vec<_> = net.store.ids().collect();
    for id in all {
        for v in net.store.get_mut(id).data_mut() {
            *v += jitter.random_range(-0.05..0.05);
        }
    }
    let path = net.predict(&image, mode).map_err(|e| e.to_string())?.path;
    if path != expect {
        return Err(format!("expected the {expect:?} path, took {path:?}"));
    }
    let mut g = Graph::bind(&net.store);
    let out = net.forward(&mut g, &image, mode).map_err(|e| e.to_string())?;
    let loss = loss_var(&mut g.tape, out.logits, &target, 0.2, 0.8).map_err(|e| e.to_string())?;
    let vars = g.param_vars().to_vec();
    let grads = g.tape.backward(loss).map_err(|e| e.to_string())?;
    let ids: Vec<_> = net.store.ids().collect();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&ids)
        .map(|(&v, &id)| grads.get_or_zeros(v, net.store.get(id).shape()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut nonzero = 0;
    for p in 0..probes {
        let t = p % ids.len();
        let j = rng.random_range(0..net.store.get(ids[t]).numel());
        let orig = net.store.get(ids[t]).data()[j];
        net.store.get_mut(ids[t]).data_mut()[j] = orig + H_NET;
        let lp = net_loss(&net, &image, &target, mode);
        net.store.get_mut(ids[t]).data_mut()[j] = orig - H_NET;
        let lm = net_loss(&net, &image, &target, mode);
        net.store.get_mut(ids[t]).data_mut()[j] = orig;
        let numeric = (lp - lm) / (2.0 * H_NET);
        let a = analytic[t].data()[j];
        if a != 0.0 {
            nonzero += 1;
        }
        if rel_err(a, numeric) > TOL {
            return Err(format!(
                "{} [{j}] ({mode:?}): analytic {a} numeric {numeric}",
                net.store.name(ids[t])
            ));
        }
    }
    Ok(nonzero)
}

pub fn candidate_net() -> PgrNet {
    let cfg = NetConfig {
        channels: vec![4, 6, 8],
        topk: Some(vec![2, 2, 2]),
        seed: 3,
        ..NetConfig::default()
    };
    PgrNet::new(cfg, toy_priors()).unwrap()
}

/// Thresholds that lock whenever the two confidences differ.
pub fn locking_net() -> PgrNet {
    let cfg = NetConfig {
        channels: vec![4, 6, 8],
        topk: Some(vec![2, 2, 2]),
        tau1: 0.0,
        tau2: Some(10.0),
        tau_lock: 0.0,
        seed: 5,
        ..NetConfig::default()
    };
    PgrNet::new(cfg, toy_priors()).unwrap()
}

pub fn fallback_net() -> PgrNet {
    let cfg = NetConfig {
        channels: vec![4, 6, 8],
        seed: 9,
        ..NetConfig::default()
    };
    PgrNet::new(cfg, toy_priors()).unwrap()
}
