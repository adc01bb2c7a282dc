//! Toy two-stream encoder: modality-specific shallow affine layers, a shared
//! trunk, and per-stream affine heads emitting spatial maps. Manually
//! differentiated; every tensor lives in a [`ParamStore`] paired with its
//! gradient accumulator.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::batch::Modality;
use crate::error::{Error, Result};
use crate::math::SpatialFeature;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Flat registry of all trainable tensors; the optimizer, checkpointing, and
/// finite-difference probing all iterate it uniformly.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        mut init: impl FnMut() -> f64,
    ) -> TensorId {
        let len = rows * cols;
        let value = (0..len).map(|_| init()).collect();
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            rows,
            cols,
            value,
            grad: vec![0.0; len],
        });
        TensorId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensor(&self, id: TensorId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn mat(&self, id: TensorId) -> ArrayView2<'_, f64> {
        let t = &self.tensors[id.0];
        ArrayView2::from_shape((t.rows, t.cols), &t.value).expect("stored shape is consistent")
    }

    /// Row 0 of a 1×D tensor as an owned vector view helper.
    pub fn vec1(&self, id: TensorId) -> Array1<f64> {
        let t = &self.tensors[id.0];
        Array1::from_vec(t.value.clone())
    }

    pub fn accumulate_mat(&mut self, id: TensorId, grad: &Array2<f64>) {
        let t = &mut self.tensors[id.0];
        debug_assert_eq!(grad.len(), t.grad.len());
        for (g, &v) in t.grad.iter_mut().zip(grad.iter()) {
            *g += v;
        }
    }

    pub fn accumulate_vec(&mut self, id: TensorId, grad: &Array1<f64>) {
        let t = &mut self.tensors[id.0];
        debug_assert_eq!(grad.len(), t.grad.len());
        for (g, &v) in t.grad.iter_mut().zip(grad.iter()) {
            *g += v;
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            for g in &mut t.grad {
                *g = 0.0;
            }
        }
    }

    /// Scale all gradients so their global L2 norm is at most `max_norm`.
    /// No-op when `max_norm <= 0` or the norm is already within bounds.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        if max_norm <= 0.0 {
            return;
        }
        let mut sq = 0.0;
        for t in &self.tensors {
            for g in &t.grad {
                sq += g * g;
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for t in &mut self.tensors {
                for g in &mut t.grad {
                    *g *= scale;
                }
            }
        }
    }

    /// Plain SGD step `p <- p - lr * g`, then zero the gradients.
    /// A non-finite gradient aborts with a diagnostic naming the tensor.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        for t in &self.tensors {
            if t.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in tensor '{}'",
                    t.name
                )));
            }
        }
        for t in &mut self.tensors {
            for (p, g) in t.value.iter_mut().zip(t.grad.iter()) {
                *p -= lr * *g;
            }
            for g in &mut t.grad {
                *g = 0.0;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|v| v.is_finite()))
    }
}

/// Step-decay learning rate: divide by `1/factor` every `every` epochs.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 0.01, factor: 0.1, every: 30 }
    }
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch / self.every) as i32)
    }
}

/// Layer widths and the spatial-map shape of the toy encoder.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderShape {
    pub input_dim: usize,
    pub shallow_width: usize,
    pub trunk_width: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub map_c: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        EncoderShape {
            input_dim: 16,
            shallow_width: 32,
            trunk_width: 64,
            map_h: 6,
            map_w: 1,
            map_c: 16,
        }
    }
}

impl EncoderShape {
    pub fn map_len(&self) -> usize {
        self.map_h * self.map_w * self.map_c
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.shallow_width == 0
            || self.trunk_width == 0
            || self.map_h == 0
            || self.map_w == 0
            || self.map_c == 0
        {
            return Err(Error::InvalidArgument("encoder shape has a zero dimension".into()));
        }
        Ok(())
    }
}

/// Tensor handles of the encoder stack.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub shape: EncoderShape,
    pub w_shallow_visible: TensorId,
    pub b_shallow_visible: TensorId,
    pub w_shallow_thermal: TensorId,
    pub b_shallow_thermal: TensorId,
    pub w_trunk: TensorId,
    pub b_trunk: TensorId,
    pub w_global: TensorId,
    pub b_global: TensorId,
    pub w_local: TensorId,
    pub b_local: TensorId,
}

/// Glorot-uniform initializer bound for a (fan_in, fan_out) layer.
fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Encoder {
    /// Register all encoder tensors, Glorot-uniform seeded weights and zero
    /// biases. The two shallow layers have identical shapes.
    pub fn init(store: &mut ParamStore, shape: &EncoderShape, rng: &mut ChaCha8Rng) -> Encoder {
        let mut weights = |name: &str, rows: usize, cols: usize, store: &mut ParamStore| {
            let s = glorot(rows, cols);
            let mut local = rng.clone();
            // Advance the shared stream so successive tensors differ.
            for _ in 0..rows * cols {
                rng.gen::<f64>();
            }
            store.add(name, rows, cols, move || local.gen_range(-s..s))
        };
        let w_shallow_visible =
            weights("encoder.shallow_visible.weight", shape.input_dim, shape.shallow_width, store);
        let w_shallow_thermal =
            weights("encoder.shallow_thermal.weight", shape.input_dim, shape.shallow_width, store);
        let w_trunk = weights("encoder.trunk.weight", shape.shallow_width, shape.trunk_width, store);
        let w_global =
            weights("encoder.global_head.weight", shape.trunk_width, shape.map_len(), store);
        let w_local =
            weights("encoder.local_head.weight", shape.trunk_width, shape.map_len(), store);
        let b_shallow_visible =
            store.add("encoder.shallow_visible.bias", 1, shape.shallow_width, || 0.0);
        let b_shallow_thermal =
            store.add("encoder.shallow_thermal.bias", 1, shape.shallow_width, || 0.0);
        let b_trunk = store.add("encoder.trunk.bias", 1, shape.trunk_width, || 0.0);
        // Map-head biases start slightly positive so no channel begins below
        // the GeM clamp for an entire modality (a dead channel has zero
        // batch variance, which degrades the moment-based losses).
        let b_global = store.add("encoder.global_head.bias", 1, shape.map_len(), || 0.1);
        let b_local = store.add("encoder.local_head.bias", 1, shape.map_len(), || 0.1);
        Encoder {
            shape: shape.clone(),
            w_shallow_visible,
            b_shallow_visible,
            w_shallow_thermal,
            b_shallow_thermal,
            w_trunk,
            b_trunk,
            w_global,
            b_global,
            w_local,
            b_local,
        }
    }

    /// Every tensor id in a stable order (for probing and checkpoints).
    pub fn tensor_ids(&self) -> Vec<TensorId> {
        vec![
            self.w_shallow_visible,
            self.b_shallow_visible,
            self.w_shallow_thermal,
            self.b_shallow_thermal,
            self.w_trunk,
            self.b_trunk,
            self.w_global,
            self.b_global,
            self.w_local,
            self.b_local,
        ]
    }
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    pub inputs: Array2<f64>,
    pub modalities: Vec<Modality>,
    pub shallow_pre: Array2<f64>,
    pub shallow_act: Array2<f64>,
    pub trunk_pre: Array2<f64>,
    pub trunk_act: Array2<f64>,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn affine(
    store: &ParamStore,
    w: TensorId,
    b: TensorId,
    x: &Array2<f64>,
) -> Array2<f64> {
    let mut out = x.dot(&store.mat(w));
    let bias = store.mat(b);
    for mut row in out.rows_mut() {
        row += &bias.row(0);
    }
    out
}

/// Per-sample spatial maps of one stream.
pub type MapBatch = Vec<SpatialFeature<f64>>;

/// Deterministic forward pass; each sample goes through the shallow layer of
/// its own modality. Returns the two spatial-map batches and the tape for the
/// backward pass.
pub fn forward(
    store: &ParamStore,
    enc: &Encoder,
    inputs: &Array2<f64>,
    modalities: &[Modality],
) -> Result<(MapBatch, MapBatch, EncoderTape)> {
    let n = inputs.nrows();
    if inputs.ncols() != enc.shape.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "encoder expects input dim {}, got {}",
            enc.shape.input_dim,
            inputs.ncols()
        )));
    }
    if modalities.len() != n {
        return Err(Error::DimensionMismatch("modality tags vs batch rows".into()));
    }
    let mut shallow_pre = Array2::zeros((n, enc.shape.shallow_width));
    for (i, &m) in modalities.iter().enumerate() {
        let (w, b) = match m {
            Modality::Visible => (enc.w_shallow_visible, enc.b_shallow_visible),
            Modality::Thermal => (enc.w_shallow_thermal, enc.b_shallow_thermal),
        };
        let wm = store.mat(w);
        let bm = store.mat(b);
        for j in 0..enc.shape.shallow_width {
            let mut acc = bm[[0, j]];
            for k in 0..enc.shape.input_dim {
                acc += inputs[[i, k]] * wm[[k, j]];
            }
            shallow_pre[[i, j]] = acc;
        }
    }
    let shallow_act = shallow_pre.mapv(relu);
    let trunk_pre = affine(store, enc.w_trunk, enc.b_trunk, &shallow_act);
    let trunk_act = trunk_pre.mapv(relu);
    let global_flat = affine(store, enc.w_global, enc.b_global, &trunk_act);
    let local_flat = affine(store, enc.w_local, enc.b_local, &trunk_act);
    let to_maps = |flat: &Array2<f64>| -> Result<Vec<SpatialFeature<f64>>> {
        (0..n)
            .map(|i| {
                SpatialFeature::new(
                    enc.shape.map_h,
                    enc.shape.map_w,
                    enc.shape.map_c,
                    flat.row(i).to_vec(),
                )
            })
            .collect()
    };
    let tape = EncoderTape {
        inputs: inputs.clone(),
        modalities: modalities.to_vec(),
        shallow_pre,
        shallow_act,
        trunk_pre,
        trunk_act,
    };
    Ok((to_maps(&global_flat)?, to_maps(&local_flat)?, tape))
}

/// Exact reverse pass from upstream map gradients (N x H*W*C per stream)
/// into the parameter store. Shallow gradients accumulate only from samples
/// of the matching modality.
pub fn backward(
    store: &mut ParamStore,
    enc: &Encoder,
    tape: &EncoderTape,
    grad_global_maps: &Array2<f64>,
    grad_local_maps: &Array2<f64>,
) -> Result<()> {
    let n = tape.inputs.nrows();
    if grad_global_maps.dim() != (n, enc.shape.map_len())
        || grad_local_maps.dim() != (n, enc.shape.map_len())
    {
        return Err(Error::DimensionMismatch("map gradient shapes".into()));
    }
    // Heads.
    store.accumulate_mat(enc.w_global, &tape.trunk_act.t().dot(grad_global_maps));
    store.accumulate_mat(enc.w_local, &tape.trunk_act.t().dot(grad_local_maps));
    store.accumulate_mat(enc.b_global, &col_sums(grad_global_maps));
    store.accumulate_mat(enc.b_local, &col_sums(grad_local_maps));
    let mut d_trunk_act = grad_global_maps.dot(&store.mat(enc.w_global).t());
    d_trunk_act += &grad_local_maps.dot(&store.mat(enc.w_local).t());
    // Trunk.
    let d_trunk_pre = relu_backward(&d_trunk_act, &tape.trunk_pre);
    store.accumulate_mat(enc.w_trunk, &tape.shallow_act.t().dot(&d_trunk_pre));
    store.accumulate_mat(enc.b_trunk, &col_sums(&d_trunk_pre));
    let d_shallow_act = d_trunk_pre.dot(&store.mat(enc.w_trunk).t());
    let d_shallow_pre = relu_backward(&d_shallow_act, &tape.shallow_pre);
    // Modality-specific shallow layers.
    for modality in [Modality::Visible, Modality::Thermal] {
        let rows: Vec<usize> =
            (0..n).filter(|&i| tape.modalities[i] == modality).collect();
        if rows.is_empty() {
            continue;
        }
        let (w, b) = match modality {
            Modality::Visible => (enc.w_shallow_visible, enc.b_shallow_visible),
            Modality::Thermal => (enc.w_shallow_thermal, enc.b_shallow_thermal),
        };
        let mut dw = Array2::zeros((enc.shape.input_dim, enc.shape.shallow_width));
        let mut db = Array2::zeros((1, enc.shape.shallow_width));
        for &i in &rows {
            for j in 0..enc.shape.shallow_width {
                let g = d_shallow_pre[[i, j]];
                db[[0, j]] += g;
                for k in 0..enc.shape.input_dim {
                    dw[[k, j]] += tape.inputs[[i, k]] * g;
                }
            }
        }
        store.accumulate_mat(w, &dw);
        store.accumulate_mat(b, &db);
    }
    Ok(())
}

fn relu_backward(grad: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    for (g, &p) in out.iter_mut().zip(pre.iter()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

fn col_sums(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((1, x.ncols()));
    for row in x.rows() {
        for (j, &v) in row.iter().enumerate() {
            out[[0, j]] += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_shape() -> EncoderShape {
        EncoderShape {
            input_dim: 3,
            shallow_width: 4,
            trunk_width: 5,
            map_h: 2,
            map_w: 1,
            map_c: 3,
        }
    }

    fn batch(n: usize, dim: usize, seed: u64) -> (Array2<f64>, Vec<Modality>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, dim), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let mods = (0..n)
            .map(|i| if i % 2 == 0 { Modality::Visible } else { Modality::Thermal })
            .collect();
        (x, mods)
    }

    #[test]
    fn zero_parameters_give_zero_maps() {
        let shape = tiny_shape();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::init(&mut store, &shape, &mut rng);
        for id in enc.tensor_ids() {
            for v in &mut store.tensor_mut(id).value {
                *v = 0.0;
            }
        }
        let (x, mods) = batch(4, 3, 1);
        let (g, l, _) = forward(&store, &enc, &x, &mods).unwrap();
        for m in g.iter().chain(l.iter()) {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identical_inputs_identical_maps() {
        let shape = tiny_shape();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::init(&mut store, &shape, &mut rng);
        let x = Array2::from_elem((2, 3), 0.4);
        let mods = vec![Modality::Visible, Modality::Visible];
        let (g, _, _) = forward(&store, &enc, &x, &mods).unwrap();
        assert_eq!(g[0].data(), g[1].data());
    }

    #[test]
    fn forward_matches_per_neuron_loop() {
        let shape = tiny_shape();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::init(&mut store, &shape, &mut rng);
        let (x, mods) = batch(3, 3, 4);
        let (g, _, _) = forward(&store, &enc, &x, &mods).unwrap();
        // Naive recomputation, scalar by scalar.
        for i in 0..3 {
            let (w_sh, b_sh) = match mods[i] {
                Modality::Visible => (enc.w_shallow_visible, enc.b_shallow_visible),
                Modality::Thermal => (enc.w_shallow_thermal, enc.b_shallow_thermal),
            };
            let wm = store.mat(w_sh);
            let bm = store.mat(b_sh);
            let mut s = vec![0.0; 4];
            for j in 0..4 {
                let mut acc = bm[[0, j]];
                for k in 0..3 {
                    acc += x[[i, k]] * wm[[k, j]];
                }
                s[j] = acc.max(0.0);
            }
            let wt = store.mat(enc.w_trunk);
            let bt = store.mat(enc.b_trunk);
            let mut t = vec![0.0; 5];
            for j in 0..5 {
                let mut acc = bt[[0, j]];
                for k in 0..4 {
                    acc += s[k] * wt[[k, j]];
                }
                t[j] = acc.max(0.0);
            }
            let wg = store.mat(enc.w_global);
            let bg = store.mat(enc.b_global);
            for j in 0..shape.map_len() {
                let mut acc = bg[[0, j]];
                for k in 0..5 {
                    acc += t[k] * wg[[k, j]];
                }
                assert!((g[i].data()[j] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn backward_zero_upstream_zero_grads() {
        let shape = tiny_shape();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::init(&mut store, &shape, &mut rng);
        let (x, mods) = batch(3, 3, 6);
        let (_, _, tape) = forward(&store, &enc, &x, &mods).unwrap();
        let zeros = Array2::zeros((3, shape.map_len()));
        backward(&mut store, &enc, &tape, &zeros, &zeros).unwrap();
        for t in store.tensors() {
            assert!(t.grad.iter().all(|&g| g == 0.0), "tensor {}", t.name);
        }
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        // One visible sample with all activations kept positive: the shallow
        // weight gradient must be input (x) outer (upstream through stack).
        let shape = tiny_shape();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = Encoder::init(&mut store, &shape, &mut rng);
        let x = Array2::from_elem((1, 3), 0.5);
        let mods = vec![Modality::Visible];
        let (_, _, tape) = forward(&store, &enc, &x, &mods).unwrap();
        let mut up_g = Array2::zeros((1, shape.map_len()));
        up_g[[0, 0]] = 1.0;
        let up_l = Array2::zeros((1, shape.map_len()));
        backward(&mut store, &enc, &tape, &up_g, &up_l).unwrap();
        // d(head bias) = upstream exactly.
        let bg = store.tensor(enc.b_global);
        assert_eq!(bg.grad[0], 1.0);
        assert!(bg.grad[1..].iter().all(|&g| g == 0.0));
        // Shallow weight grad rows are proportional to the constant input.
        let sw = store.tensor(enc.w_shallow_visible);
        for j in 0..shape.shallow_width {
            let a = sw.grad[j];
            for k in 1..3 {
                assert!((sw.grad[k * shape.shallow_width + j] - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_stack_gradients_match_fd() {
        let shape = tiny_shape();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = Encoder::init(&mut store, &shape, &mut rng);
        let (x, mods) = batch(4, 3, 9);
        // Scalar objective: weighted sum of both output maps.
        let wsum_g = Array2::from_shape_fn((4, shape.map_len()), |(i, j)| {
            ((i * 7 + j * 3) % 5) as f64 * 0.25 - 0.5
        });
        let wsum_l = Array2::from_shape_fn((4, shape.map_len()), |(i, j)| {
            ((i * 3 + j * 5) % 7) as f64 * 0.2 - 0.6
        });
        let objective = |store: &ParamStore| -> f64 {
            let (g, l, _) = forward(store, &enc, &x, &mods).unwrap();
            let mut acc = 0.0;
            for i in 0..4 {
                for j in 0..shape.map_len() {
                    acc += wsum_g[[i, j]] * g[i].data()[j] + wsum_l[[i, j]] * l[i].data()[j];
                }
            }
            acc
        };
        let (_, _, tape) = forward(&store, &enc, &x, &mods).unwrap();
        backward(&mut store, &enc, &tape, &wsum_g, &wsum_l).unwrap();
        let h = 1e-5;
        let mut rng2 = ChaCha8Rng::seed_from_u64(10);
        let ids = enc.tensor_ids();
        for _ in 0..20 {
            let id = ids[rng2.gen_range(0..ids.len())];
            let idx = rng2.gen_range(0..store.tensor(id).value.len());
            let analytic = store.tensor(id).grad[idx];
            let orig = store.tensor(id).value[idx];
            store.tensor_mut(id).value[idx] = orig + h;
            let plus = objective(&store);
            store.tensor_mut(id).value[idx] = orig - h;
            let minus = objective(&store);
            store.tensor_mut(id).value[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                rel <= 1e-5,
                "{}[{}]: analytic {} vs fd {}",
                store.tensor(id).name,
                idx,
                analytic,
                fd
            );
        }
    }

    #[test]
    fn modality_isolation() {
        let shape = tiny_shape();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = Encoder::init(&mut store, &shape, &mut rng);
        let (x, _) = batch(3, 3, 12);
        let mods = vec![Modality::Visible; 3];
        let (g0, l0, _) = forward(&store, &enc, &x, &mods).unwrap();
        // Perturb every thermal shallow parameter.
        for v in &mut store.tensor_mut(enc.w_shallow_thermal).value {
            *v += 13.0;
        }
        for v in &mut store.tensor_mut(enc.b_shallow_thermal).value {
            *v -= 7.0;
        }
        let (g1, l1, _) = forward(&store, &enc, &x, &mods).unwrap();
        for i in 0..3 {
            assert_eq!(g0[i].data(), g1[i].data());
            assert_eq!(l0[i].data(), l1[i].data());
        }
    }

    #[test]
    fn sgd_arithmetic_and_schedule() {
        let mut store = ParamStore::new();
        let id = store.add("p", 1, 1, || 1.0);
        store.tensor_mut(id).grad[0] = 0.5;
        store.sgd_step(0.01).unwrap();
        assert!((store.tensor(id).value[0] - 0.995).abs() < 1e-15);
        assert_eq!(store.tensor(id).grad[0], 0.0);

        let sched = LrSchedule::default();
        assert!((sched.at_epoch(0) - 0.01).abs() < 1e-15);
        assert!((sched.at_epoch(29) - 0.01).abs() < 1e-15);
        assert!((sched.at_epoch(30) - 0.001).abs() < 1e-15);
        assert!((sched.at_epoch(60) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn clip_grad_norm_scales_to_bound() {
        let mut store = ParamStore::new();
        let id = store.add("p", 1, 2, || 0.0);
        store.tensor_mut(id).grad[0] = 3.0;
        store.tensor_mut(id).grad[1] = 4.0;
        store.clip_grad_norm(2.5);
        assert!((store.tensor(id).grad[0] - 1.5).abs() < 1e-12);
        assert!((store.tensor(id).grad[1] - 2.0).abs() < 1e-12);
        // Within bounds: untouched. Disabled: untouched.
        store.clip_grad_norm(10.0);
        assert!((store.tensor(id).grad[0] - 1.5).abs() < 1e-12);
        store.clip_grad_norm(0.0);
        assert!((store.tensor(id).grad[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", 1, 2, || 1.0);
        store.tensor_mut(id).grad[1] = f64::NAN;
        assert!(matches!(store.sgd_step(0.1), Err(Error::Numerical(_))));
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("p", 2, 2, || 3.0);
        store.sgd_step(0.5).unwrap();
        assert!(store.tensor(id).value.iter().all(|&v| v == 3.0));
    }
}
