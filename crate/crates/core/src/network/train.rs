//! Segmentation loss, Adam, and the epoch loop with early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Mode, TrainConfig};
use super::data::{labels_from_logits, Dataset};
use super::{Path, PgrNet};
use crate::error::{dim_err, Error, Result};
use crate::exec::Exec;
use crate::labelio::Region;
use crate::metrics::{dice, hd95, RegionMask};
use crate::numerics::{Graph, ParamStore, Tape, Tensor, Var};

/// `w_dice·(1 − mean soft Dice) + w_bce·BCE`, with soft Dice per class
/// `(2Σpy + 1)/(Σp + Σy + 1)` over sigmoid probabilities.
pub fn loss_var(tape: &mut Tape, logits: Var, target: &Tensor, w_dice: f64, w_bce: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape != target.shape() || shape.len() != 3 {
        return dim_err(format!("loss: logits {shape:?} vs target {:?}", target.shape()));
    }
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let p = tape.sigmoid(logits)?;
    let p = tape.reshape(p, &[c, plane])?;
    let y = tape.constant(target.clone().reshape(&[c, plane])?);
    let ones = tape.constant(Tensor::full(&[plane, 1], 1.0));
    let py = tape.mul(p, y)?;
    let inter = tape.matmul(py, ones)?;
    let psum = tape.matmul(p, ones)?;
    let ysum: Vec<f64> = target.data().chunks(plane).map(|ch| ch.iter().sum::<f64>() + 1.0).collect();
    let ysum = tape.constant(Tensor::new(vec![c, 1], ysum)?);
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, 1.0)?;
    let den = tape.add(psum, ysum)?;
    let soft = tape.div(num, den)?;
    let md = tape.mean(soft)?;
    let dice_term = tape.scale(md, -w_dice)?;
    let dice_term = tape.add_scalar(dice_term, w_dice)?;
    let bce = tape.bce_with_logits(logits, target)?;
    let bce = tape.scale(bce, w_bce)?;
    tape.add(dice_term, bce)
}

/// Loss and parameter gradients (in store order) for one sample.
pub fn sample_loss_and_grads(
    net: &PgrNet,
    image: &Tensor,
    target: &Tensor,
    mode: Mode,
    weights: (f64, f64),
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::bind(&net.store);
    let out = net.forward(&mut g, image, mode)?;
    let loss = loss_var(&mut g.tape, out.logits, target, weights.0, weights.1)?;
    let value = g.tape.value(loss).item();
    let vars = g.param_vars().to_vec();
    let grads = g.tape.backward(loss)?;
    let per = vars
        .iter()
        .zip(net.store.ids())
        .map(|(&v, id)| grads.get_or_zeros(v, net.store.get(id).shape()))
        .collect();
    Ok((value, per))
}

/// Mean loss and mean gradients over `indices`, reduced in index order.
pub fn batch_gradients(
    net: &PgrNet,
    data: &Dataset,
    indices: &[usize],
    mode: Mode,
    weights: (f64, f64),
    exec: Exec,
) -> Result<(f64, Vec<Tensor>)> {
    let results = exec.map(indices, |&i| {
        let s = &data.samples[i];
        sample_loss_and_grads(net, &s.image, &s.target, mode, weights)
    });
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for r in results {
        let (l, gs) = r?;
        total += l;
        match &mut acc {
            None => acc = Some(gs),
            Some(a) => {
                for (t, g) in a.iter_mut().zip(gs) {
                    for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let n = indices.len().max(1) as f64;
    let grads = acc
        .unwrap_or_default()
        .into_iter()
        .map(|t| t.map(|v| v / n))
        .collect();
    Ok((total / n, grads))
}

/// Adam with bias correction, `β = (0.9, 0.999)`, `ε = 1e-8`.
pub struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Adam {
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            for (j, &g) in grads[k].data().iter().enumerate() {
                let m = &mut self.m[k][j];
                let v = &mut self.v[k][j];
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                p[j] -= self.lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub val_hd95: f64,
    pub fallback_rate: f64,
}

impl EpochRow {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_dice,val_hd95,fallback_rate";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.8},{:.6},{:.6},{:.6}",
            self.epoch, self.train_loss, self.val_dice, self.val_hd95, self.fallback_rate
        )
    }
}

/// Result of [`train`]; `net` holds the best-validation parameters.
pub struct TrainOutcome {
    pub net: PgrNet,
    pub history: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stopped_early: bool,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from(EpochRow::CSV_HEADER);
        s.push('\n');
        for r in &self.history {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

/// Mean WT Dice, mean WT HD95 and fallback share over `indices`.
pub fn validate(net: &PgrNet, data: &Dataset, indices: &[usize], mode: Mode, exec: Exec) -> Result<(f64, f64, f64)> {
    let per = exec.map(indices, |&i| -> Result<(f64, f64, bool)> {
        let s = &data.samples[i];
        let p = net.predict(&s.image, mode)?;
        let pred = labels_from_logits(&p.logits)?;
        let pm = RegionMask::from_labels(&pred, Region::WT);
        let gm = RegionMask::from_labels(&s.labels, Region::WT);
        Ok((dice(&pm, &gm)?.value, hd95(&pm, &gm)?.value, p.path == Path::Fallback))
    });
    let (mut d, mut h, mut f) = (0.0, 0.0, 0usize);
    for r in per {
        let (a, b, c) = r?;
        d += a;
        h += b;
        f += usize::from(c);
    }
    let n = indices.len().max(1) as f64;
    Ok((d / n, h / n, f as f64 / n))
}

/// Trains on a seeded 8:2-style split, keeping the parameters with the best
/// validation Dice. Stops after `patience` epochs without improvement.
/// `on_epoch` sees every log row as it is produced.
pub fn train(
    mut net: PgrNet,
    data: &Dataset,
    cfg: &TrainConfig,
    exec: Exec,
    on_epoch: &mut dyn FnMut(&EpochRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Contract("training needs at least two cases".into()));
    }
    let (train_idx, val_idx) = data.split(cfg.val_fraction, cfg.seed);
    let weights = cfg.loss_weights();
    let mut adam = Adam::new(&net.store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order = train_idx.clone();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = batch_gradients(&net, data, chunk, cfg.train_mode, weights, exec)
                .map_err(|e| match e {
                    Error::NonFinite(op) => {
                        Error::Diverged(format!("epoch {epoch}, batch {b}: non-finite value in {op}"))
                    }
                    other => other,
                })?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("epoch {epoch}, batch {b}: loss {loss}")));
            }
            total += loss * chunk.len() as f64;
            adam.step(&mut net.store, &grads);
        }
        let (vd, vh, fr) = validate(&net, data, &val_idx, cfg.eval_mode, exec)?;
        let row = EpochRow {
            epoch,
            train_loss: total / order.len() as f64,
            val_dice: vd,
            val_hd95: vh,
            fallback_rate: fr,
        };
        on_epoch(&row);
        history.push(row);
        if best.as_ref().is_none_or(|b| vd > b.1) {
            best = Some((epoch, vd, net.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_dice, store) = best.expect("at least one epoch ran");
    net.store = store;
    Ok(TrainOutcome {
        net,
        history,
        best_epoch,
        best_val_dice,
        stopped_early,
        train_idx,
        val_idx,
    })
}
