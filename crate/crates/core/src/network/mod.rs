//! The assembled segmentation network: a convolutional trunk, ROI window
//! encoders per level driven by the Top-K decision, and a decoder whose
//! upsampling and skip connections are confined to the locked ROI.

mod config;
mod data;
mod train;

pub use config::{Mode, NetConfig, Settings, TrainConfig};
pub use data::{labels_from_logits, prepare_image, targets_for, Dataset, Sample};
pub use train::{
    batch_gradients, loss_var, sample_loss_and_grads, train, validate, Adam, EpochRow, TrainOutcome,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{encode_layer, window_box, Candidate, Guidance};
use crate::error::{dim_err, Error, Result};
use crate::htk::{decide_on_graph, ConfidenceRecord, HtkConfig, ScorerHead};
use crate::numerics::{Graph, ParamId, ParamStore, Tape, Tensor, Var};
use crate::prior::RoiPrior;
use crate::retention::{gamma_schedule, RetentionBlock};
use crate::wings::{decayed_template, disk_mask, guidance_var, RoiInstance};

/// Which path a forward pass actually took.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Path {
    Fallback,
    Candidate,
    Locked,
}

/// Result of [`PgrNet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `classes×H×W` logits.
    pub logits: Var,
    /// `None` when the decision was skipped (forced full-image mode).
    pub record: Option<ConfidenceRecord>,
    pub path: Path,
    /// Number of hard zero-masking operations executed.
    pub hard_masks: usize,
}

/// Plain-tensor result of [`PgrNet::predict`].
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub record: Option<ConfidenceRecord>,
    pub path: Path,
}

/// The network with its parameters and ROI priors.
pub struct PgrNet {
    pub config: NetConfig,
    pub priors: Vec<RoiPrior>,
    pub store: ParamStore,
    htk: HtkConfig,
    trunk: Vec<(ParamId, ParamId)>,
    blocks: Vec<RetentionBlock>,
    scorers: Vec<ScorerHead>,
    decoder: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

fn conv_params(
    store: &mut ParamStore,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (ParamId, ParamId) {
    let std = (2.0 / (inp * k * k) as f64).sqrt();
    (
        store.add_normal(format!("{name}.w"), &[out, inp, k, k], std, rng),
        store.add_zeros(format!("{name}.b"), &[out]),
    )
}

impl PgrNet {
    /// Builds a freshly initialised network for `priors`.
    pub fn new(config: NetConfig, priors: Vec<RoiPrior>) -> Result<Self> {
        config.validate()?;
        if priors.is_empty() {
            return Err(Error::Contract("the network needs at least one ROI prior".into()));
        }
        let htk = config.htk(priors.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let ch = &config.channels;
        let l = ch.len();
        let mut trunk = Vec::with_capacity(l);
        for i in 0..l {
            let inp = if i == 0 { config.in_channels } else { ch[i - 1] };
            trunk.push(conv_params(&mut store, &format!("trunk{i}"), ch[i], inp, 3, &mut rng));
        }
        let gammas = gamma_schedule(config.retention_heads);
        let mut blocks = Vec::with_capacity(l);
        let mut scorers = Vec::with_capacity(l);
        for (i, &c) in ch.iter().enumerate() {
            blocks.push(RetentionBlock::new(&mut store, &format!("window{i}"), c, &gammas, &mut rng, false)?);
            scorers.push(ScorerHead::new(&mut store, &format!("scorer{i}"), c, &mut rng, false));
        }
        let mut decoder = Vec::with_capacity(l - 1);
        for i in 0..l - 1 {
            decoder.push(conv_params(&mut store, &format!("decoder{i}"), ch[i], ch[i] + ch[i + 1], 3, &mut rng));
        }
        let head = conv_params(&mut store, "head", config.classes, ch[0], 1, &mut rng);
        Ok(PgrNet {
            config,
            priors,
            store,
            htk,
            trunk,
            blocks,
            scorers,
            decoder,
            head,
        })
    }

    pub fn htk_config(&self) -> &HtkConfig {
        &self.htk
    }

    /// Prior `i` placed on a `height×width` level. Prior centres are
    /// pixel-index means at input resolution, so half an input pixel is
    /// added to express them in pixel-centre coordinates.
    pub fn roi_on_level(&self, i: usize, rho: f64, input: (usize, usize), level: (usize, usize)) -> RoiInstance {
        let p = &self.priors[i];
        let cx = p.cx + 0.5 / input.1 as f64;
        let cy = p.cy + 0.5 / input.0 as f64;
        RoiInstance::with_fractions(cx, cy, p.r, rho, level.0, self.config.sigma_ratio, self.config.tau_ratio)
    }

    /// Forward pass of one `C×H×W` image on `g`.
    pub fn forward(&self, g: &mut Graph, image: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let levels = cfg.levels();
        let (h, w) = match *image.shape() {
            [c, h, w] if c == cfg.in_channels => (h, w),
            _ => {
                return dim_err(format!(
                    "expected a {}×H×W image, got {:?}",
                    cfg.in_channels,
                    image.shape()
                ))
            }
        };
        let div = 1usize << (levels - 1);
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return dim_err(format!("image {h}×{w} is not divisible by {div}"));
        }

        let x = g.tape.constant(image.clone());
        let mut feats = Vec::with_capacity(levels);
        for (i, &(wt, bs)) in self.trunk.iter().enumerate() {
            let inp = if i == 0 { x } else { g.tape.avgpool2x2(feats[i - 1])? };
            let (wv, bv) = (g.p(wt), g.p(bs));
            let c = g.tape.conv2d(inp, wv, Some(bv), 1, 1)?;
            feats.push(g.tape.relu(c)?);
        }

        let decision = match mode {
            Mode::Fallback => None,
            _ => Some(decide_on_graph(g, &feats, &self.priors, &self.scorers, &self.htk)?),
        };
        let path = match (&decision, mode) {
            (None, _) => Path::Fallback,
            (Some(_), Mode::Candidate) => Path::Candidate,
            (Some(d), _) if d.record.fallback => Path::Fallback,
            (Some(d), _) if d.record.locked => Path::Locked,
            _ => Path::Candidate,
        };

        let mut hard_masks = 0;
        let mut outs = Vec::with_capacity(levels);
        let mut disks: Vec<Option<Tensor>> = vec![None; levels];
        for l in 0..levels {
            let (hl, wl) = (h >> l, w >> l);
            let f = feats[l];
            let block = &self.blocks[l];
            let out = match (path, &decision) {
                (Path::Fallback, _) | (_, None) => {
                    encode_layer(g, block, f, &[], None, cfg.gamma_fuse, Guidance::None)?.output
                }
                (_, Some(d)) => {
                    let chosen: Vec<usize> = if path == Path::Locked {
                        vec![d.record.r_star.expect("locked decisions carry a winner")]
                    } else {
                        d.selected[l].clone()
                    };
                    if chosen.is_empty() {
                        encode_layer(g, block, f, &[], None, cfg.gamma_fuse, Guidance::None)?.output
                    } else {
                        let rho = g.tape.gather(d.aggregate, &chosen)?;
                        let mut units = Vec::with_capacity(chosen.len());
                        let mut cands = Vec::new();
                        for (slot, &i) in chosen.iter().enumerate() {
                            let roi = self.roi_on_level(i, 1.0, (h, w), (hl, wl));
                            units.push(decayed_template(&roi, hl, wl)?);
                            match window_box(roi.cx, roi.cy, roi.r, hl, wl) {
                                Ok(bbox) => cands.push(Candidate { bbox, slot }),
                                Err(Error::Degenerate(_)) => {}
                                Err(e) => return Err(e),
                            }
                        }
                        let map = guidance_var(&mut g.tape, rho, &units, cfg.eps)?;
                        let guidance = if path == Path::Locked {
                            let roi = self.roi_on_level(chosen[0], 1.0, (h, w), (hl, wl));
                            disks[l] = Some(disk_mask(&roi, hl, wl));
                            hard_masks += 1;
                            Guidance::Locked {
                                map,
                                lambda: cfg.lambda,
                                disk: disks[l].as_ref().unwrap(),
                            }
                        } else {
                            Guidance::Soft { map, lambda: cfg.lambda }
                        };
                        encode_layer(g, block, f, &cands, Some(rho), cfg.gamma_fuse, guidance)?.output
                    }
                }
            };
            outs.push(out);
        }

        let mut d = outs[levels - 1];
        for l in (0..levels - 1).rev() {
            let disk = disks[l].as_ref();
            let up = roi_only_upsample(&mut g.tape, d, disk)?;
            let skip = roi_aware_skip(&mut g.tape, outs[l], up, disk)?;
            hard_masks += 2 * usize::from(disk.is_some());
            let (wv, bv) = (g.p(self.decoder[l].0), g.p(self.decoder[l].1));
            let c = g.tape.conv2d(skip, wv, Some(bv), 1, 1)?;
            d = g.tape.relu(c)?;
        }
        let (wv, bv) = (g.p(self.head.0), g.p(self.head.1));
        let logits = g.tape.conv2d(d, wv, Some(bv), 1, 0)?;
        Ok(ForwardOutput {
            logits,
            record: decision.map(|d| d.record),
            path,
            hard_masks,
        })
    }

    /// Forward pass without gradients.
    pub fn predict(&self, image: &Tensor, mode: Mode) -> Result<Prediction> {
        let mut g = Graph::bind(&self.store);
        let out = self.forward(&mut g, image, mode)?;
        Ok(Prediction {
            logits: g.tape.value(out.logits).clone(),
            record: out.record,
            path: out.path,
        })
    }
}

/// Nearest-neighbour 2× upsampling; with a `disk` (at the upsampled
/// resolution) everything outside it is zeroed.
pub fn roi_only_upsample(tape: &mut Tape, f: Var, disk: Option<&Tensor>) -> Result<Var> {
    let up = tape.upsample2x(f)?;
    match disk {
        None => Ok(up),
        Some(m) => {
            let mv = tape.constant(m.clone());
            tape.mul_spatial(up, mv)
        }
    }
}

/// Concatenates decoder features with encoder features, the latter masked
/// to `disk` when one is given.
pub fn roi_aware_skip(tape: &mut Tape, enc: Var, dec: Var, disk: Option<&Tensor>) -> Result<Var> {
    let (se, sd) = (tape.shape(enc), tape.shape(dec));
    if se.len() != 3 || sd.len() != 3 || se[1..] != sd[1..] {
        return dim_err(format!("skip: encoder {se:?} vs decoder {sd:?}"));
    }
    let enc = match disk {
        None => enc,
        Some(m) => {
            let mv = tape.constant(m.clone());
            tape.mul_spatial(enc, mv)?
        }
    };
    tape.concat(&[dec, enc])
}
