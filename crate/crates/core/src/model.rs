//! The full trainable model: two-stream encoder, per-granularity norm
//! scales and running statistics, classifier heads, and the part-weight
//! logits, all registered in one parameter store.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::Modality;
use crate::checkpoint::{self, CheckpointMeta, NamedTensor};
use crate::encoder::{self, Encoder, EncoderShape, ParamStore, TensorId};
use crate::error::{Error, Result};
use crate::math::{BnMode, SpatialFeature};
use crate::mgs::{
    extract_mgs, extract_mgs_backward, HeadParams, MgsFeatures, MgsHeads, MgsLossOutput,
    MgsNormState,
};

/// Tensor handles of one affine classifier head.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub weight: TensorId,
    pub bias: TensorId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub shape: EncoderShape,
    pub parts: usize,
    pub gem_p: f64,
    pub num_identities: usize,
    pub bn_scale_global: TensorId,
    pub bn_scale_locals: Vec<TensorId>,
    pub part_logits: TensorId,
    pub head_global: Head,
    pub head_locals: Vec<Head>,
    pub head_accumulated: Vec<Head>,
    pub norm: MgsNormState<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    pub tape: encoder::EncoderTape,
    pub global_maps: Vec<SpatialFeature<f64>>,
    pub local_maps: Vec<SpatialFeature<f64>>,
    pub extract: crate::mgs::MgsExtractCache<f64>,
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Model {
    pub fn new(
        shape: &EncoderShape,
        parts: usize,
        gem_p: f64,
        num_identities: usize,
        seed: u64,
    ) -> Result<Model> {
        shape.validate()?;
        if !shape.map_h.is_multiple_of(parts) {
            return Err(Error::InvalidArgument(format!(
                "map height {} not divisible by {} parts",
                shape.map_h, parts
            )));
        }
        if num_identities < 2 {
            return Err(Error::InvalidArgument("model needs at least 2 identities".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::init(&mut store, shape, &mut rng);
        let c = shape.map_c;
        let bn_scale_global = store.add("norm.global.scale", 1, c, || 1.0);
        let bn_scale_locals: Vec<TensorId> = (0..parts)
            .map(|k| store.add(&format!("norm.local{}.scale", k), 1, c, || 1.0))
            .collect();
        let part_logits = store.add("mgs.part_logits", 1, parts, || 0.0);
        let head = |name: String, inputs: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            let s = glorot_bound(inputs, num_identities);
            let mut local = rng.clone();
            for _ in 0..inputs * num_identities {
                rng.gen::<f64>();
            }
            Head {
                weight: store.add(&format!("{}.weight", name), inputs, num_identities, move || {
                    local.gen_range(-s..s)
                }),
                bias: store.add(&format!("{}.bias", name), 1, num_identities, || 0.0),
            }
        };
        let head_global = head("head.global".into(), c, &mut store, &mut rng);
        let head_locals: Vec<Head> =
            (0..parts).map(|k| head(format!("head.local{}", k), c, &mut store, &mut rng)).collect();
        let head_accumulated: Vec<Head> = (2..=parts)
            .map(|k| head(format!("head.accumulated{}", k), k * c, &mut store, &mut rng))
            .collect();
        Ok(Model {
            store,
            encoder: enc,
            shape: shape.clone(),
            parts,
            gem_p,
            num_identities,
            bn_scale_global,
            bn_scale_locals,
            part_logits,
            head_global,
            head_locals,
            head_accumulated,
            norm: MgsNormState::new(c, parts),
        })
    }

    /// Encoder plus pooling/normalization forward pass.
    pub fn forward(
        &mut self,
        inputs: &Array2<f64>,
        modalities: &[Modality],
        mode: BnMode,
        trainable_weights: bool,
    ) -> Result<(MgsFeatures<f64>, Option<ForwardCache>)> {
        let (gmaps, lmaps, tape) =
            encoder::forward(&self.store, &self.encoder, inputs, modalities)?;
        let gscale = self.store.vec1(self.bn_scale_global);
        let lscales: Vec<Array1<f64>> =
            self.bn_scale_locals.iter().map(|&id| self.store.vec1(id)).collect();
        let lscale_views: Vec<_> = lscales.iter().map(|s| s.view()).collect();
        let logits = self.store.vec1(self.part_logits);
        let (features, cache) = extract_mgs(
            &gmaps,
            &lmaps,
            self.parts,
            self.gem_p,
            &gscale.view(),
            &lscale_views,
            &mut self.norm,
            mode,
            &logits.view(),
            trainable_weights,
        )?;
        let cache = cache.map(|extract| ForwardCache {
            tape,
            global_maps: gmaps,
            local_maps: lmaps,
            extract,
        });
        Ok((features, cache))
    }

    /// Accumulate all gradients from a loss evaluation into the store.
    pub fn backward(&mut self, cache: &ForwardCache, out: &MgsLossOutput<f64>) -> Result<()> {
        let gscale = self.store.vec1(self.bn_scale_global);
        let lscales: Vec<Array1<f64>> =
            self.bn_scale_locals.iter().map(|&id| self.store.vec1(id)).collect();
        let lscale_views: Vec<_> = lscales.iter().map(|s| s.view()).collect();
        let grads = extract_mgs_backward(
            &cache.global_maps,
            &cache.local_maps,
            self.parts,
            self.gem_p,
            &gscale.view(),
            &lscale_views,
            &cache.extract,
            &out.grad_global,
            &out.grad_locals,
        )?;
        encoder::backward(
            &mut self.store,
            &self.encoder,
            &cache.tape,
            &grads.global_maps,
            &grads.local_maps,
        )?;
        self.store.accumulate_mat(
            self.bn_scale_global,
            &grads.global_scale.clone().insert_axis(ndarray::Axis(0)),
        );
        for (k, g) in grads.local_scales.iter().enumerate() {
            self.store.accumulate_mat(
                self.bn_scale_locals[k],
                &g.clone().insert_axis(ndarray::Axis(0)),
            );
        }
        self.store.accumulate_mat(
            self.part_logits,
            &out.grad_part_logits.clone().insert_axis(ndarray::Axis(0)),
        );
        self.store.accumulate_mat(self.head_global.weight, &out.grad_global_head.weight);
        self.store.accumulate_mat(
            self.head_global.bias,
            &out.grad_global_head.bias.clone().insert_axis(ndarray::Axis(0)),
        );
        for (k, hg) in out.grad_local_heads.iter().enumerate() {
            self.store.accumulate_mat(self.head_locals[k].weight, &hg.weight);
            self.store.accumulate_mat(
                self.head_locals[k].bias,
                &hg.bias.clone().insert_axis(ndarray::Axis(0)),
            );
        }
        for (k, hg) in out.grad_accumulated_heads.iter().enumerate() {
            self.store.accumulate_mat(self.head_accumulated[k].weight, &hg.weight);
            self.store.accumulate_mat(
                self.head_accumulated[k].bias,
                &hg.bias.clone().insert_axis(ndarray::Axis(0)),
            );
        }
        Ok(())
    }

    /// Classifier-head views in the layout the loss assembler expects.
    pub fn heads(&self) -> MgsHeads<'_, f64> {
        let view = |h: &Head| HeadParams {
            weight: self.store.mat(h.weight),
            bias: self
                .store
                .mat(h.bias)
                .into_shape_with_order(self.store.tensor(h.bias).cols)
                .expect("bias is a row vector"),
        };
        MgsHeads {
            global: view(&self.head_global),
            locals: self.head_locals.iter().map(&view).collect(),
            accumulated: self.head_accumulated.iter().map(view).collect(),
        }
    }

    /// Eval-mode fused retrieval features for a batch of raw inputs.
    pub fn inference_features(
        &mut self,
        inputs: &Array2<f64>,
        modalities: &[Modality],
        beta: f64,
    ) -> Result<Array2<f64>> {
        let (features, _) = self.forward(inputs, modalities, BnMode::Eval, true)?;
        crate::mgs::inference_feature(&features.locals, &features.global, beta)
    }

    /// All state as named tensors (parameters plus norm running statistics).
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .store
            .tensors()
            .iter()
            .map(|t| NamedTensor {
                name: t.name.clone(),
                rows: t.rows,
                cols: t.cols,
                values: t.value.clone(),
            })
            .collect();
        let mut push_state = |name: String, v: &Array1<f64>| {
            out.push(NamedTensor { name, rows: 1, cols: v.len(), values: v.to_vec() });
        };
        push_state("norm.global.running_mean".into(), &self.norm.global.running_mean);
        push_state("norm.global.running_var".into(), &self.norm.global.running_var);
        for (k, st) in self.norm.locals.iter().enumerate() {
            push_state(format!("norm.local{}.running_mean", k), &st.running_mean);
            push_state(format!("norm.local{}.running_var", k), &st.running_var);
        }
        out
    }

    pub fn save(&self, path: &std::path::Path, meta: &CheckpointMeta) -> Result<()> {
        checkpoint::save(path, meta, &self.named_tensors())
    }

    /// Rebuild a model from a checkpoint. Shapes are re-derived from the
    /// metadata; a tensor mismatch is an explicit error.
    pub fn load(path: &std::path::Path) -> Result<(Model, CheckpointMeta)> {
        let (meta, tensors) = checkpoint::load(path)?;
        let mut model =
            Model::new(&meta.encoder, meta.parts, meta.gem_p, meta.num_identities, 0)?;
        for t in &tensors {
            if let Some(e) = model.store.by_name_mut(&t.name) {
                if e.rows != t.rows || e.cols != t.cols {
                    return Err(Error::Config(format!(
                        "checkpoint tensor '{}' is {}x{}, model expects {}x{}",
                        t.name, t.rows, t.cols, e.rows, e.cols
                    )));
                }
                e.value.copy_from_slice(&t.values);
            } else if let Some(rest) = t.name.strip_prefix("norm.") {
                let (slot, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("unknown tensor '{}'", t.name)))?;
                let state = if slot == "global" {
                    &mut model.norm.global
                } else if let Some(k) = slot.strip_prefix("local").and_then(|s| s.parse::<usize>().ok())
                {
                    model.norm.locals.get_mut(k).ok_or_else(|| {
                        Error::Config(format!("checkpoint names part {}, model has fewer", k))
                    })?
                } else {
                    return Err(Error::Config(format!("unknown norm slot '{}'", slot)));
                };
                let target = match field {
                    "running_mean" => &mut state.running_mean,
                    "running_var" => &mut state.running_var,
                    other => {
                        return Err(Error::Config(format!("unknown norm field '{}'", other)))
                    }
                };
                if target.len() != t.values.len() {
                    return Err(Error::Config(format!(
                        "checkpoint state '{}' length {} vs model {}",
                        t.name,
                        t.values.len(),
                        target.len()
                    )));
                }
                for (dst, &src) in target.iter_mut().zip(t.values.iter()) {
                    *dst = src;
                }
            } else {
                return Err(Error::Config(format!("unknown tensor '{}' in checkpoint", t.name)));
            }
        }
        Ok((model, meta))
    }

    /// Ids of every trainable tensor, stable order.
    pub fn all_tensor_ids(&self) -> Vec<TensorId> {
        let mut ids = self.encoder.tensor_ids();
        ids.push(self.bn_scale_global);
        ids.extend(self.bn_scale_locals.iter().copied());
        ids.push(self.part_logits);
        for h in std::iter::once(&self.head_global)
            .chain(self.head_locals.iter())
            .chain(self.head_accumulated.iter())
        {
            ids.push(h.weight);
            ids.push(h.bias);
        }
        ids
    }
}
