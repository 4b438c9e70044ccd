//! Compact encoder-decoder segmentation network with a class head and an
//! embedding head on a shared trunk.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{self as ag, Real, Tensor, Var};
use crate::error::{FwsError, Result};
use crate::image::FundusImage;

/// Parameter budget of the default architecture.
pub const PARAM_BUDGET: usize = 2_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub embed_dim: usize,
    pub base_width: usize,
    pub levels: usize,
    pub convs_per_level: usize,
    pub norm_groups: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            classes: 3,
            embed_dim: 16,
            base_width: 16,
            levels: 4,
            convs_per_level: 2,
            norm_groups: 4,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("classes", self.classes),
            ("embed_dim", self.embed_dim),
            ("base_width", self.base_width),
            ("levels", self.levels),
            ("convs_per_level", self.convs_per_level),
            ("norm_groups", self.norm_groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FwsError::Config(format!("net.{name} must be >= 1")));
            }
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Names and shapes of every parameter, in forward order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut m = Vec::new();
        let block = |m: &mut Vec<(String, Vec<usize>)>, prefix: String, cin: usize, cout: usize| {
            let mut c = cin;
            for i in 0..self.convs_per_level {
                m.push((format!("{prefix}.conv{i}.weight"), vec![cout, c, 3, 3]));
                m.push((format!("{prefix}.norm{i}.gamma"), vec![cout]));
                m.push((format!("{prefix}.norm{i}.beta"), vec![cout]));
                c = cout;
            }
        };
        let mut cin = self.in_channels;
        for l in 0..self.levels {
            block(&mut m, format!("enc{l}"), cin, self.width(l));
            cin = self.width(l);
        }
        for l in (0..self.levels - 1).rev() {
            block(&mut m, format!("dec{l}"), self.width(l + 1) + self.width(l), self.width(l));
        }
        let w0 = self.width(0);
        m.push(("seg.weight".into(), vec![self.classes, w0, 1, 1]));
        m.push(("seg.bias".into(), vec![self.classes]));
        m.push(("embed.weight".into(), vec![self.embed_dim, w0, 1, 1]));
        m.push(("embed.bias".into(), vec![self.embed_dim]));
        m
    }

    pub fn param_count(&self) -> usize {
        self.manifest().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn groups_for(&self, channels: usize) -> usize {
        (1..=self.norm_groups.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
    }
}

/// Network parameters with their shape manifest.
#[derive(Clone, Debug)]
pub struct ParamSet<T: Real> {
    manifest: Arc<Vec<(String, Vec<usize>)>>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(manifest: Arc<Vec<(String, Vec<usize>)>>, values: Vec<Tensor<T>>) -> Result<Self> {
        if manifest.len() != values.len() {
            return Err(FwsError::Shape(format!("{} tensors for {} manifest entries", values.len(), manifest.len())));
        }
        for ((name, shape), v) in manifest.iter().zip(&values) {
            if v.shape() != shape.as_slice() {
                return Err(FwsError::Shape(format!("{name}: expected {shape:?}, got {:?}", v.shape())));
            }
        }
        Ok(Self { manifest, values })
    }

    pub fn manifest(&self) -> &[(String, Vec<usize>)] {
        &self.manifest
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn total_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Trainable graph leaves for every parameter.
    pub fn vars(&self) -> Vec<Var<T>> {
        self.values.iter().cloned().map(Var::param).collect()
    }

    /// Graph constants for every parameter, for forward-only evaluation.
    pub fn constants(&self) -> Vec<Var<T>> {
        self.values.iter().cloned().map(Var::constant).collect()
    }

    /// Takes the current values of `vars`, which must follow the manifest.
    pub fn from_vars(&self, vars: &[Var<T>]) -> Result<Self> {
        Self::new(Arc::clone(&self.manifest), vars.iter().map(|v| v.value().clone()).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { manifest: Arc::clone(&self.manifest), values: self.values.iter().map(Tensor::cast).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Flattened parameter vector in manifest order.
    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.total_count() {
            return Err(FwsError::Shape(format!("{} values for {} parameters", flat.len(), self.total_count())));
        }
        let mut off = 0;
        let values = self
            .values
            .iter()
            .map(|t| {
                let t2 = Tensor::new(t.shape(), flat[off..off + t.len()].to_vec());
                off += t.len();
                t2
            })
            .collect();
        Ok(Self { manifest: Arc::clone(&self.manifest), values })
    }
}

/// The network definition. Parameters are passed separately so the same
/// definition evaluates updated (and differentiable) parameter sets.
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: NetConfig,
}

impl UNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// He-normal initialization; norm scales at 1, biases at 0.
    pub fn init<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let manifest = self.cfg.manifest();
        let count: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if count >= PARAM_BUDGET {
            log::warn!("network has {count} parameters, over the {PARAM_BUDGET} budget");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = manifest
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    Tensor::new(shape, (0..n).map(|_| T::of(normal.sample(&mut rng))).collect())
                } else if name.ends_with(".gamma") {
                    Tensor::ones(shape)
                } else {
                    Tensor::zeros(shape)
                }
            })
            .collect();
        ParamSet { manifest: Arc::new(manifest), values }
    }

    fn check_input<T: Real>(&self, params: &[Var<T>], x: &Var<T>) -> Result<()> {
        let expected = self.cfg.manifest().len();
        if params.len() != expected {
            return Err(FwsError::Shape(format!("{} parameters, expected {expected}", params.len())));
        }
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(FwsError::Shape(format!(
                "input {s:?}, expected [B, {}, H, W]",
                self.cfg.in_channels
            )));
        }
        let m = self.cfg.spatial_multiple();
        if !s[2].is_multiple_of(m) || !s[3].is_multiple_of(m) {
            return Err(FwsError::Shape(format!("spatial dims {}x{} not multiples of {m}", s[2], s[3])));
        }
        Ok(())
    }

    fn block<T: Real>(&self, params: &mut std::slice::Iter<'_, Var<T>>, mut x: Var<T>) -> Var<T> {
        for _ in 0..self.cfg.convs_per_level {
            let (w, gamma, beta) = (next(params), next(params), next(params));
            let y = ag::conv2d(&x, w);
            let groups = self.cfg.groups_for(y.shape()[1]);
            let y = ag::group_norm(&y, groups, gamma, beta, self.cfg.norm_eps);
            x = ag::leaky_relu(&y, self.cfg.leaky_slope);
        }
        x
    }

    /// Final decoder feature map, `[B, base_width, H, W]`.
    pub fn trunk<T: Real>(&self, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        self.check_input(params, x)?;
        let mut it = params.iter();
        let mut skips = Vec::with_capacity(self.cfg.levels);
        let mut h = x.clone();
        for l in 0..self.cfg.levels {
            if l > 0 {
                h = ag::avg_pool2(&h);
            }
            h = self.block(&mut it, h);
            skips.push(h.clone());
        }
        skips.pop();
        while let Some(skip) = skips.pop() {
            h = ag::concat_channels(&ag::upsample2(&h), &skip);
            h = self.block(&mut it, h);
        }
        Ok(h)
    }

    fn head<T: Real>(feat: &Var<T>, w: &Var<T>, b: &Var<T>) -> Var<T> {
        let c = b.shape()[0];
        ag::add_bcast(&ag::conv2d(feat, w), &ag::reshape(b, &[1, c, 1, 1]))
    }

    fn head_params<T: Real>(params: &[Var<T>], embed: bool) -> (&Var<T>, &Var<T>) {
        let n = params.len();
        if embed {
            (&params[n - 2], &params[n - 1])
        } else {
            (&params[n - 4], &params[n - 3])
        }
    }

    /// Per-pixel class log-probabilities, `[B, C, H, W]`.
    pub fn seg_log_probs<T: Real>(&self, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        let feat = self.trunk(params, x)?;
        let (w, b) = Self::head_params(params, false);
        Ok(ag::log_softmax_channels(&Self::head(&feat, w, b)))
    }

    /// Per-pixel class probabilities, `[B, C, H, W]`.
    pub fn forward_seg<T: Real>(&self, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        Ok(ag::exp(&self.seg_log_probs(params, x)?))
    }

    /// Per-pixel embeddings, `[B, M, H, W]`.
    pub fn forward_embed<T: Real>(&self, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        let feat = self.trunk(params, x)?;
        let (w, b) = Self::head_params(params, true);
        Ok(Self::head(&feat, w, b))
    }
}

fn next<'a, T: Real>(it: &mut std::slice::Iter<'a, Var<T>>) -> &'a Var<T> {
    it.next().expect("parameter count checked against manifest")
}

/// Stacks images into a `[B, L, H, W]` tensor.
pub fn batch_images<T: Real>(images: &[&FundusImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| FwsError::Shape("empty image batch".into()))?;
    let (h, w, l) = (first.height(), first.width(), first.channels());
    let mut data = Vec::with_capacity(images.len() * h * w * l);
    for img in images {
        if (img.height(), img.width(), img.channels()) != (h, w, l) {
            return Err(FwsError::Shape("images in a batch differ in size".into()));
        }
        data.extend(img.to_chw().into_iter().map(|v| T::of(v as f64)));
    }
    Ok(Tensor::new(&[images.len(), l, h, w], data))
}

/// `θ - lr * g`, differentiable in both `θ` and `g`.
pub fn inner_update<T: Real>(params: &[Var<T>], grads: &[Var<T>], lr: f64) -> Result<Vec<Var<T>>> {
    if params.len() != grads.len() {
        return Err(FwsError::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    params
        .iter()
        .zip(grads)
        .enumerate()
        .map(|(i, (p, g))| {
            if p.shape() != g.shape() {
                return Err(FwsError::Shape(format!("gradient {i}: {:?} vs {:?}", g.shape(), p.shape())));
            }
            if !g.value().all_finite() {
                return Err(FwsError::NonFinite(format!("inner gradient for parameter {i}")));
            }
            Ok(if lr == 0.0 { p.clone() } else { ag::sub(p, &ag::scale(g, lr)) })
        })
        .collect()
}

/// Metadata stored next to a parameter blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub net: NetConfig,
    pub learner: String,
    pub seed: u64,
    pub epoch: usize,
    pub param_count: usize,
    pub config_fingerprint: String,
    pub params_sha256: String,
}

const BLOB: &str = "params.bin";
const MANIFEST: &str = "manifest.json";

/// Writes `params.bin` (little-endian `f32`) and `manifest.json` into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ParamSet<f32>, meta: &CheckpointManifest) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| FwsError::io(dir, e))?;
    let blob: Vec<u8> = params.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut meta = meta.clone();
    meta.param_count = params.total_count();
    meta.params_sha256 = hex::encode(Sha256::digest(&blob));
    let p = dir.join(BLOB);
    fs::write(&p, &blob).map_err(|e| FwsError::io(p, e))?;
    let p = dir.join(MANIFEST);
    fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| FwsError::io(p, e))?;
    Ok(meta)
}

/// Loads a checkpoint, verifying the blob digest and the manifest shapes.
pub fn load_checkpoint(dir: &Path) -> Result<(UNet, ParamSet<f32>, CheckpointManifest)> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| FwsError::io(&p, e))?;
    let meta: CheckpointManifest = serde_json::from_str(&text)?;
    let p = dir.join(BLOB);
    let blob = fs::read(&p).map_err(|e| FwsError::io(&p, e))?;
    if hex::encode(Sha256::digest(&blob)) != meta.params_sha256 {
        return Err(FwsError::Data { path: p, msg: "parameter digest does not match manifest".into() });
    }
    let net = UNet::new(meta.net.clone())?;
    let flat: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let params = net.init::<f32>(0).unflatten(&flat)?;
    Ok((net, params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            in_channels: 1,
            classes: 2,
            embed_dim: 2,
            base_width: 1,
            levels: 2,
            convs_per_level: 1,
            norm_groups: 1,
            ..NetConfig::default()
        }
    }

    fn input(shape: &[usize], seed: u64) -> Var<f64> {
        let n: usize = shape.iter().product();
        Var::constant(Tensor::new(
            shape,
            (0..n).map(|i| ((i as u64 * 7919 + seed * 31) % 101) as f64 / 101.0).collect(),
        ))
    }

    #[test]
    fn default_fits_budget() {
        let n = NetConfig::default().param_count();
        assert!(n < PARAM_BUDGET, "{n}");
        assert_eq!(UNet::new(NetConfig::default()).unwrap().init::<f32>(0).total_count(), n);
    }

    #[test]
    fn wide_config_exceeds_budget() {
        // Analytic count: each level's block is 9*(cin*cout + cout*cout) weights
        // plus 4*cout norm parameters.
        let cfg = NetConfig { base_width: 64, levels: 5, ..NetConfig::default() };
        let w = |l: usize| 64usize << l;
        let block = |cin: usize, cout: usize| 9 * (cin * cout + cout * cout) + 4 * cout;
        let mut want = block(3, w(0));
        for l in 1..5 {
            want += block(w(l - 1), w(l));
        }
        for l in 0..4 {
            want += block(w(l + 1) + w(l), w(l));
        }
        want += 3 * 64 + 3 + 16 * 64 + 16;
        assert_eq!(cfg.param_count(), want);
        assert!(want >= PARAM_BUDGET);
    }

    #[test]
    fn tiny_net_is_under_a_hundred_params() {
        assert!(tiny().param_count() <= 100);
    }

    #[test]
    fn init_is_deterministic() {
        let net = UNet::new(NetConfig::default()).unwrap();
        assert_eq!(net.init::<f32>(3).flatten(), net.init::<f32>(3).flatten());
        assert_ne!(net.init::<f32>(3).flatten(), net.init::<f32>(4).flatten());
    }

    #[test]
    fn probabilities_normalized_and_batch_independent() {
        let cfg = NetConfig { base_width: 4, levels: 3, ..NetConfig::default() };
        let net = UNet::new(cfg).unwrap();
        let params = net.init::<f64>(1).vars();
        let x = input(&[2, 3, 8, 8], 5);
        let p = net.forward_seg(&params, &x).unwrap();
        assert_eq!(p.shape(), &[2, 3, 8, 8]);
        let d = p.value().data();
        for b in 0..2 {
            for j in 0..64 {
                let s: f64 = (0..3).map(|c| d[b * 192 + c * 64 + j]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        for b in 0..2 {
            let xb = Var::constant(Tensor::new(&[1, 3, 8, 8], x.value().data()[b * 192..(b + 1) * 192].to_vec()));
            let pb = net.forward_seg(&params, &xb).unwrap();
            for (u, v) in pb.value().data().iter().zip(&d[b * 192..(b + 1) * 192]) {
                assert!((u - v).abs() < 1e-5);
            }
        }
        let e = net.forward_embed(&params, &x).unwrap();
        assert_eq!(e.shape(), &[2, 16, 8, 8]);
        assert!(e.value().all_finite());
    }

    #[test]
    fn rejects_bad_input() {
        let net = UNet::new(NetConfig::default()).unwrap();
        let params = net.init::<f64>(1).vars();
        assert!(net.forward_seg(&params, &input(&[1, 1, 8, 8], 0)).is_err());
        assert!(net.forward_seg(&params, &input(&[1, 3, 12, 12], 0)).is_err());
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let net = UNet::new(tiny()).unwrap();
        let base = net.init::<f64>(2);
        let x = input(&[2, 1, 8, 8], 1);
        let f = |ps: &ParamSet<f64>| -> (f64, Vec<f64>) {
            let vars = ps.vars();
            let y = ag::sum_all(&net.forward_embed(&vars, &x).unwrap());
            let g = ag::grad(&y, &vars, false);
            (y.item(), g.iter().flat_map(|g| g.value().to_vec()).collect())
        };
        let (_, analytic) = f(&base);
        let flat = base.flatten();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            let fp = f(&base.unflatten(&p).unwrap()).0;
            p[i] -= 2.0 * h;
            let fm = f(&base.unflatten(&p).unwrap()).0;
            let num = (fp - fm) / (2.0 * h);
            let err = (analytic[i] - num).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err <= 1e-3 || (analytic[i] - num).abs() < 1e-7, "param {i}: {} vs {num}", analytic[i]);
        }
    }

    #[test]
    fn inner_update_zero_lr_is_identity() {
        let net = UNet::new(tiny()).unwrap();
        let vars = net.init::<f64>(0).vars();
        let grads: Vec<_> = vars.iter().map(|v| Var::constant(Tensor::ones(v.shape()))).collect();
        let out = inner_update(&vars, &grads, 0.0).unwrap();
        for (a, b) in vars.iter().zip(&out) {
            assert_eq!(a.value().data(), b.value().data());
        }
        let bad: Vec<_> = vars.iter().map(|v| Var::constant(Tensor::full(v.shape(), f64::NAN))).collect();
        assert!(inner_update(&vars, &bad, 0.1).is_err());
    }

    #[test]
    fn inner_update_second_order_on_quadratic() {
        // f(t) = a t^2, inner t' = t - lr * 2 a t, outer L = t'^2.
        // dL/dt = 2 t' (1 - 2 a lr).
        let (a, lr, t0) = (1.5, 0.1, 0.7);
        let t = Var::param(Tensor::scalar(t0));
        let f = ag::scale(&ag::mul(&t, &t), a);
        let g = ag::grad(&f, std::slice::from_ref(&t), true);
        let t1 = inner_update(std::slice::from_ref(&t), &g, lr).unwrap().remove(0);
        let l = ag::mul(&t1, &t1);
        let d = ag::grad(&l, std::slice::from_ref(&t), false).remove(0).item();
        let tp = t0 - lr * 2.0 * a * t0;
        assert!((d - 2.0 * tp * (1.0 - 2.0 * a * lr)).abs() < 1e-12);
    }

    #[test]
    fn two_inner_updates_compose() {
        let (a, lr, t0) = (0.8, 0.2, -1.3);
        let t = Var::param(Tensor::scalar(t0));
        let step = |p: &Var<f64>| {
            let f = ag::scale(&ag::mul(p, p), a);
            let g = ag::grad(&f, std::slice::from_ref(p), true);
            inner_update(std::slice::from_ref(p), &g, lr).unwrap().remove(0)
        };
        let t2 = step(&step(&t));
        let k = 1.0 - 2.0 * a * lr;
        assert!((t2.item() - t0 * k * k).abs() < 1e-12);
        let d = ag::grad(&t2, &[t], false).remove(0).item();
        assert!((d - k * k).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = UNet::new(tiny()).unwrap();
        let params = net.init::<f32>(9);
        let meta = CheckpointManifest {
            net: tiny(),
            learner: "protoseg".into(),
            seed: 9,
            epoch: 1,
            param_count: 0,
            config_fingerprint: "abc".into(),
            params_sha256: String::new(),
        };
        let saved = save_checkpoint(dir.path(), &params, &meta).unwrap();
        let (_, loaded, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.flatten(), params.flatten());
        assert_eq!(m, saved);
        fs::write(dir.path().join(BLOB), [0u8; 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
