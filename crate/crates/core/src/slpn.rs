//! The SLPN perturbation network, its supervised training loop and the
//! end-to-end SLP-DL precoder.

use std::path::Path;

use ndarray::{s, Array3, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use num_complex::Complex64;
use crate::modulation::{CirCoefficients, Constellation};
use crate::par::{self, Execution};
use crate::slp::{self, Criterion, KktFeatures, PrecodedBlock};
use crate::te::{Amde, BatchNorm, Ctx, Hoe, Linear, Mde, Mode, Prelu, BN_MOMENTUM};

/// Depth and width of an SLPN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlpnConfig {
    /// Number of stacked AMDE blocks.
    pub blocks: usize,
    /// Feature width.
    pub width: usize,
}

impl Default for SlpnConfig {
    fn default() -> Self {
        SlpnConfig { blocks: 4, width: 4 }
    }
}

/// SLPN parameters and layer wiring.
#[derive(Clone, Debug)]
pub struct Slpn {
    pub config: SlpnConfig,
    pub store: ParamStore,
    hoe: Hoe,
    hoe_bn: BatchNorm,
    c_fc: Linear,
    c_bn: BatchNorm,
    c_act: Prelu,
    b_mde: Mde,
    b_bn: BatchNorm,
    b_act: Prelu,
    merge: Linear,
    blocks: Vec<Amde>,
    out: Linear,
}

const EQ_AXES: [usize; 2] = [1, 2];

impl Slpn {
    pub fn new(config: SlpnConfig, rng: &mut impl Rng) -> Self {
        let f = config.width;
        let mut st = ParamStore::new();
        let hoe = Hoe::new(&mut st, "c.hoe", 8, f, rng);
        let hoe_bn = BatchNorm::new(&mut st, "c.hoe_bn", f);
        let c_fc = Linear::new(&mut st, "c.fc", f, f, rng);
        let c_bn = BatchNorm::new(&mut st, "c.bn", f);
        let c_act = Prelu::new(&mut st, "c.act");
        let b_mde = Mde::new(&mut st, "b.mde", &EQ_AXES, 4, f, rng);
        let b_bn = BatchNorm::new(&mut st, "b.bn", f);
        let b_act = Prelu::new(&mut st, "b.act");
        let merge = Linear::new(&mut st, "merge", 2 * f, f, rng);
        let blocks = (0..config.blocks).map(|i| Amde::new(&mut st, &format!("amde{i}"), &EQ_AXES, &EQ_AXES, f, rng)).collect();
        let out = Linear::new(&mut st, "out", f, 2, rng);
        Slpn { config, store: st, hoe, hoe_bn, c_fc, c_bn, c_act, b_mde, b_bn, b_act, merge, blocks, out }
    }

    /// Batched forward: `B` is `N×K×L×4`, `C` is `N×K×K×L×8`, output `N×K×L×2`.
    pub fn forward(&self, cx: &mut Ctx, b: Var, c: Var) -> Result<Var> {
        let (bs, cs) = (cx.g.shape(b).to_vec(), cx.g.shape(c).to_vec());
        if bs.len() != 4 || cs.len() != 5 || bs[3] != 4 || cs[4] != 8 || cs[1] != bs[1] || cs[2] != bs[1] || cs[3] != bs[2] || cs[0] != bs[0] {
            return Err(Error::shape(format!("SLPN inputs {bs:?} and {cs:?}")));
        }
        let h = self.hoe.forward(cx, c)?;
        let h = self.hoe_bn.forward(cx, h)?;
        let h = cx.g.silu(h);
        let h = self.c_fc.forward(cx, h)?;
        let h = self.c_bn.forward(cx, h)?;
        let hc = self.c_act.forward(cx, h)?;
        let h = self.b_mde.forward(cx, b)?;
        let h = self.b_bn.forward(cx, h)?;
        let hb = self.b_act.forward(cx, h)?;
        let cat = cx.g.concat(&[hc, hb], 3)?;
        let mut x = self.merge.forward(cx, cat)?;
        for blk in &self.blocks {
            x = blk.forward(cx, x)?;
        }
        self.out.forward(cx, x)
    }

    /// Eval-mode prediction on a batch.
    pub fn predict(&self, b: &Tensor, c: &Tensor) -> Result<Tensor> {
        let mut cx = Ctx::inference(&self.store);
        let bv = cx.input(b.clone());
        let cv = cx.input(c.clone());
        let d = self.forward(&mut cx, bv, cv)?;
        Ok(cx.g.value(d).clone())
    }

    /// Eval-mode prediction for one block, `K×L×2`.
    pub fn predict_one(&self, f: &KktFeatures) -> Result<Array3<f64>> {
        let (b, c) = stack_features(std::slice::from_ref(f))?;
        let d = self.predict(&b, &c)?;
        Ok(d.index_axis_move(Axis(0), 0).into_dimensionality().expect("rank 3"))
    }

    /// Zeroes the output layer so that every prediction is `D = 0`.
    pub fn zero_output(&mut self) {
        self.store.value_mut(self.out.w).fill(0.0);
        self.store.value_mut(self.out.b).fill(0.0);
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "model": "slpn", "config": self.config, "extra": extra });
        self.store.save(path, &meta)
    }

    /// Restores a checkpoint written by [`Slpn::save`]; returns its extra metadata.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::load(path)?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("slpn") {
            return Err(Error::Format("checkpoint does not hold an SLPN".into()));
        }
        let config: SlpnConfig = serde_json::from_value(meta["config"].clone())?;
        let mut model = Slpn::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        model.store.load_values_from(&store)?;
        Ok((model, meta["extra"].clone()))
    }
}

/// Stacks real KKT features into `(N×K×L×4, N×K×K×L×8)` batch tensors.
pub fn stack_features(feats: &[KktFeatures]) -> Result<(Tensor, Tensor)> {
    stack_feature_refs(&feats.iter().collect::<Vec<_>>())
}

fn stack_feature_refs(feats: &[&KktFeatures]) -> Result<(Tensor, Tensor)> {
    let first = feats.first().ok_or(Error::EmptyDataset)?;
    let (k, l, _) = first.b_c.dim();
    let mut b = Vec::with_capacity(feats.len() * k * l * 4);
    let mut c = Vec::with_capacity(feats.len() * k * k * l * 8);
    for f in feats {
        if f.b_c.dim() != (k, l, 2) || f.c_c.dim() != (k, k, l, 4) {
            return Err(Error::shape("feature blocks must share K and L"));
        }
        for z in f.b_c.exact_chunks((1, 1, 2)) {
            b.extend([z[(0, 0, 0)].re, z[(0, 0, 1)].re, z[(0, 0, 0)].im, z[(0, 0, 1)].im]);
        }
        for z in f.c_c.exact_chunks((1, 1, 1, 4)) {
            let z = z.as_slice().expect("standard layout chunk");
            push_re_im(&mut c, z);
        }
    }
    let n = feats.len();
    Ok((
        ArrayD::from_shape_vec(IxDyn(&[n, k, l, 4]), b).expect("sized"),
        ArrayD::from_shape_vec(IxDyn(&[n, k, k, l, 8]), c).expect("sized"),
    ))
}

fn push_re_im(out: &mut Vec<f64>, z: &[Complex64]) {
    out.extend(z.iter().map(|v| v.re));
    out.extend(z.iter().map(|v| v.im));
}

/// Stacks `K×L×2` perturbation tensors into an `N×K×L×2` batch.
pub fn stack_labels(ds: &[Array3<f64>]) -> Result<Tensor> {
    let views: Vec<_> = ds.iter().map(|d| d.view().insert_axis(Axis(0))).collect();
    Ok(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?.into_dyn())
}

/// Supervised SLPN data: features and optimal perturbation labels.
#[derive(Clone, Debug)]
pub struct SlpnDataset {
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

impl SlpnDataset {
    pub fn new(b: Tensor, c: Tensor, d: Tensor) -> Result<Self> {
        let n = b.shape()[0];
        if c.shape()[0] != n || d.shape()[0] != n || d.shape()[1..] != [b.shape()[1], b.shape()[2], 2] {
            return Err(Error::shape(format!("dataset arrays {:?}, {:?}, {:?}", b.shape(), c.shape(), d.shape())));
        }
        Ok(SlpnDataset { b, c, d })
    }

    pub fn len(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> SlpnDataset {
        SlpnDataset { b: self.b.select(Axis(0), idx), c: self.c.select(Axis(0), idx), d: self.d.select(Axis(0), idx) }
    }

    /// Mean squared label entry: the loss of always predicting zero.
    pub fn zero_predictor_mse(&self) -> f64 {
        self.d.iter().map(|v| v * v).sum::<f64>() / self.d.len() as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_high: f64,
    pub lr_low: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, batch: 400, lr_high: 5e-3, lr_low: 5e-4 }
    }
}

impl TrainConfig {
    /// Two-stage schedule: the high rate for the first half of the epochs.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.epochs.div_ceil(2) {
            self.lr_high
        } else {
            self.lr_low
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub lr: f64,
}

fn mse_loss(cx: &mut Ctx, pred: Var, target: &Tensor) -> Result<Var> {
    let t = cx.input(target.clone());
    let diff = cx.g.sub(pred, t)?;
    let sq = cx.g.mul(diff, diff)?;
    let axes: Vec<usize> = (0..target.ndim()).collect();
    cx.g.mean(sq, &axes)
}

/// Something trainable by minibatch Adam on an MSE loss.
pub trait Regressor {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Training-or-eval forward on a batch; returns the prediction.
    fn forward_batch(&self, cx: &mut Ctx, inputs: &[Var]) -> Result<Var>;
}

impl Regressor for Slpn {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn forward_batch(&self, cx: &mut Ctx, inputs: &[Var]) -> Result<Var> {
        self.forward(cx, inputs[0], inputs[1])
    }
}

/// Generic minibatch training data: input tensors and a target, all with a
/// leading sample axis.
#[derive(Clone, Debug)]
pub struct Batchable {
    pub inputs: Vec<Tensor>,
    pub target: Tensor,
}

impl Batchable {
    pub fn len(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Batchable {
        Batchable {
            inputs: self.inputs.iter().map(|t| t.select(Axis(0), idx)).collect(),
            target: self.target.select(Axis(0), idx),
        }
    }
}

impl From<&SlpnDataset> for Batchable {
    fn from(d: &SlpnDataset) -> Self {
        Batchable { inputs: vec![d.b.clone(), d.c.clone()], target: d.d.clone() }
    }
}

/// Eval-mode MSE on a dataset, evaluated in chunks.
pub fn eval_loss<M: Regressor + Sync>(model: &M, data: &Batchable, chunk: usize, exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.len();
    let chunks = n.div_ceil(chunk.max(1));
    let sums = par::try_map_range(exec, chunks, |i| {
        let idx: Vec<usize> = (i * chunk..((i + 1) * chunk).min(n)).collect();
        let part = data.select(&idx);
        let mut cx = Ctx::inference(model.store());
        let ins: Vec<Var> = part.inputs.iter().map(|t| cx.input(t.clone())).collect();
        let pred = model.forward_batch(&mut cx, &ins)?;
        let sq: f64 = cx.g.value(pred).iter().zip(part.target.iter()).map(|(p, t)| (p - t).powi(2)).sum();
        Ok::<_, Error>(sq)
    })?;
    Ok(sums.iter().sum::<f64>() / data.target.len() as f64)
}

/// Minibatch Adam with the two-stage learning rate. Returns one log row per
/// epoch; the model is left in its final state.
pub fn train_regressor<M: Regressor + Sync>(
    model: &mut M,
    train: &Batchable,
    test: Option<&Batchable>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    exec: Execution,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let mut opt = Adam::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in order.chunks(cfg.batch) {
            let part = train.select(idx);
            let (loss, grads, updates) = {
                let mut cx = Ctx::new(model.store(), Mode::Train);
                let ins: Vec<Var> = part.inputs.iter().map(|t| cx.input(t.clone())).collect();
                let pred = model.forward_batch(&mut cx, &ins)?;
                let loss = mse_loss(&mut cx, pred, &part.target)?;
                let value = *cx.g.value(loss).iter().next().unwrap();
                let grads = cx.backward(loss)?;
                (value, grads, cx.take_bn_updates())
            };
            opt.step(model.store_mut(), &grads, lr)?;
            model.store_mut().apply_bn_updates(&updates, BN_MOMENTUM);
            total += loss * idx.len() as f64;
            count += idx.len();
        }
        let train_loss = total / count as f64;
        let test_loss = match test {
            Some(t) => eval_loss(model, t, cfg.batch, exec)?,
            None => f64::NAN,
        };
        log::debug!("epoch {epoch}: train {train_loss:.6e} test {test_loss:.6e} lr {lr}");
        logs.push(EpochLog { epoch, train_loss, test_loss, lr });
    }
    Ok(logs)
}

/// Trains an SLPN on `(B, C) → D*`.
pub fn train(
    model: &mut Slpn,
    train: &SlpnDataset,
    test: Option<&SlpnDataset>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    exec: Execution,
) -> Result<Vec<EpochLog>> {
    let test = test.map(Batchable::from);
    train_regressor(model, &Batchable::from(train), test.as_ref(), cfg, rng, exec)
}

/// Writes the `epoch,train_loss,test_loss,lr` log.
pub fn write_training_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,test_loss,lr\n");
    for l in logs {
        out.push_str(&format!("{},{:.9e},{:.9e},{}\n", l.epoch, l.train_loss, l.test_loss, l.lr));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Output of the learned precoder for one block.
#[derive(Clone, Debug)]
pub struct SlpDlOutput {
    pub block: PrecodedBlock,
    /// Network perturbations after the ReLU, `K×L×2`.
    pub d_hat: Array3<f64>,
    pub rho: Vec<f64>,
    pub s_tilde: ndarray::Array2<num_complex::Complex64>,
}

/// Everything SLP-DL needs for one block besides the network output.
pub struct SlpDlInputs {
    pub upsilon: CMatrix,
    pub precoder: CMatrix,
    pub features: KktFeatures,
}

pub fn slp_dl_inputs(criterion: Criterion, h: &CMatrix, symbols: &ndarray::Array2<usize>, c: &Constellation, p_t: f64) -> Result<SlpDlInputs> {
    let upsilon = criterion.upsilon(h, p_t)?;
    let precoder = criterion.precoder(h, p_t)?;
    let features = slp::kkt_features(std::slice::from_ref(&upsilon), symbols, c)?;
    Ok(SlpDlInputs { upsilon, precoder, features })
}

/// Finishes SLP-DL from a raw network output: ReLU, optional refinement,
/// closed-form precoding and block reallocation.
pub fn slp_dl_finish(
    inputs: &SlpDlInputs,
    symbols: &ndarray::Array2<usize>,
    c: &Constellation,
    p_t: f64,
    d_raw: &Array3<f64>,
    refine: bool,
) -> Result<SlpDlOutput> {
    let s = c.map_symbols(symbols);
    let cir = CirCoefficients::from_symbols(symbols, c);
    let d_hat = d_raw.mapv(|v| v.max(0.0));
    let (rho, s_tilde) = if refine {
        slp::post_refine(std::slice::from_ref(&inputs.upsilon), &s, &cir, &d_hat)
    } else {
        (vec![1.0; s.ncols()], slp::perturbed_symbols(&s, &cir, &d_hat))
    };
    let block = slp::precode_closed_form(&[&inputs.precoder], &s_tilde, p_t)?;
    Ok(SlpDlOutput { block, d_hat, rho, s_tilde })
}

/// The learned CIZF (or CIMMSE) precoder for one block.
pub fn slp_dl(
    model: &Slpn,
    criterion: Criterion,
    h: &CMatrix,
    symbols: &ndarray::Array2<usize>,
    c: &Constellation,
    p_t: f64,
    refine: bool,
) -> Result<SlpDlOutput> {
    let inputs = slp_dl_inputs(criterion, h, symbols, c, p_t)?;
    let d = model.predict_one(&inputs.features)?;
    slp_dl_finish(&inputs, symbols, c, p_t, &d, refine)
}

/// SLP-DL over many blocks: one batched network pass, per-block tails in parallel.
pub fn slp_dl_batch(
    model: &Slpn,
    criterion: Criterion,
    blocks: &[(CMatrix, ndarray::Array2<usize>)],
    c: &Constellation,
    p_t: f64,
    refine: bool,
    exec: Execution,
) -> Result<Vec<SlpDlOutput>> {
    let inputs = par::try_map_slice(exec, blocks, |(h, sym)| slp_dl_inputs(criterion, h, sym, c, p_t))?;
    let feats: Vec<&KktFeatures> = inputs.iter().map(|i| &i.features).collect();
    let (b, cc) = stack_feature_refs(&feats)?;
    let d = model.predict(&b, &cc)?;
    par::try_map_range(exec, blocks.len(), |i| {
        let di: Array3<f64> = d.slice(s![i, .., .., ..]).to_owned();
        slp_dl_finish(&inputs[i], &blocks[i].1, c, p_t, &di, refine)
    })
}
