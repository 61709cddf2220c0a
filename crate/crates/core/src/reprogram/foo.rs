//! First-order prompt training on the primed local model, and cost-free
//! inference. The head stays frozen here; only the prompt parameters
//! move, by exact gradients through the input transformation and the
//! local forward pass. No API handle ever enters this module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LocalModel;
use crate::numeric::{softmax, Adam, AdamConfig, Graph, ParamSet, Tensor};
use crate::reprogram::{flm_fit, blm_fit, LabelMap, MapKind, Prompt, PromptGeometry, PromptKind};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VrConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Label-map refresh interval in epochs.
    pub refresh_interval: usize,
    pub prompt: PromptKind,
    pub blm_alpha: f64,
    pub seed: u64,
}

impl Default for VrConfig {
    fn default() -> Self {
        VrConfig {
            lr: 1e-2,
            epochs: 200,
            batch_size: 32,
            refresh_interval: 10,
            prompt: PromptKind::Padding,
            blm_alpha: 1.0,
            seed: 0,
        }
    }
}

impl VrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("vr config needs positive lr/epochs/batch".into()));
        }
        if self.refresh_interval == 0 {
            return Err(Error::Config("refresh interval must be >= 1".into()));
        }
        if self.blm_alpha <= 0.0 {
            return Err(Error::Config("blm alpha must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FooOutcome {
    pub prompt: Prompt,
    pub map: LabelMap,
    pub loss_curve: Vec<f64>,
}

/// Fit a label map from the local model's predictions under the current
/// prompt. Gradient-free: argmax counting for FLM, probability sums for
/// BLM.
fn fit_map(
    local: &LocalModel,
    prompt: &Prompt,
    images: &[Tensor],
    labels: &[usize],
    target_classes: usize,
    map_kind: MapKind,
    blm_alpha: f64,
) -> Result<LabelMap> {
    let source_classes = local.head_width();
    match map_kind {
        MapKind::Identity => {
            if source_classes != target_classes {
                return Err(Error::Config(format!(
                    "identity map needs equal widths, got {source_classes} vs {target_classes}"
                )));
            }
            Ok(LabelMap::Identity {
                classes: target_classes,
            })
        }
        MapKind::Flm => {
            let mut preds = Vec::with_capacity(images.len());
            for img in images {
                let logits = local.forward_one(&prompt.apply(img)?)?;
                preds.push(logits.argmax());
            }
            flm_fit(&preds, labels, target_classes, source_classes)
        }
        MapKind::Blm => {
            let mut probs = Vec::with_capacity(images.len());
            for img in images {
                let logits = local.forward_one(&prompt.apply(img)?)?;
                probs.push(softmax(&logits)?);
            }
            blm_fit(&probs, labels, target_classes, source_classes, blm_alpha)
        }
    }
}

/// Stage two of the pipeline: learn the prompt by exact gradients while
/// the primed head stays frozen. The label map is recomputed every
/// `refresh_interval` epochs from the current prompted predictions.
/// Returns the trained prompt, the final map, and the per-epoch loss
/// curve. Zero API calls by construction: nothing here can reach one.
pub fn train_prompt_foo(
    local: &LocalModel,
    images: &[Tensor],
    labels: &[usize],
    target_classes: usize,
    map_kind: MapKind,
    geom: PromptGeometry,
    cfg: &VrConfig,
) -> Result<FooOutcome> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidInput("empty or mismatched training set".into()));
    }
    if geom.canvas_numel() != local.input_dim() {
        return Err(Error::Config(format!(
            "canvas {} does not match local input {}",
            geom.canvas_numel(),
            local.input_dim()
        )));
    }
    if labels.iter().any(|&y| y >= target_classes) {
        return Err(Error::Index("target label out of range".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prompt = Prompt::zeroed(cfg.prompt, geom)?;
    let mut map = fit_map(local, &prompt, images, labels, target_classes, map_kind, cfg.blm_alpha)?;

    let mut prompt_params = ParamSet::new();
    prompt_params.insert("prompt", prompt.params().clone(), true);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &prompt_params);

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if epoch > 0 && epoch % cfg.refresh_interval == 0 {
            map = fit_map(local, &prompt, images, labels, target_classes, map_kind, cfg.blm_alpha)?;
        }
        crate::models::shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let prompted: Vec<Tensor> = chunk
                .iter()
                .map(|&i| prompt.apply(&images[i]))
                .collect::<Result<_>>()?;
            let batch = Tensor::stack_rows(&prompted)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let mut g = Graph::new();
            let x = g.input(batch)?;
            let (logits, _) = local.forward_graph(&mut g, x)?;
            let loss = match &map {
                LabelMap::Identity { .. } => g.cross_entropy_mean(logits, batch_labels)?,
                _ => {
                    let probs = g.softmax_rows(logits)?;
                    let mapped = map.map_graph(&mut g, probs)?;
                    g.nll_mean(mapped, batch_labels)?
                }
            };
            let loss_val = g.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(Error::Training(format!("vr loss diverged at epoch {epoch}")));
            }
            epoch_loss += loss_val;
            batches += 1.0;

            let grads = g.backward(loss)?;
            let d_canvas_batch = grads.get(x, &g);
            let canvas_dim = geom.canvas_numel();
            let mut prompt_grad = Tensor::zeros(vec![prompt.dim()]);
            for (row, &i) in chunk.iter().enumerate() {
                let d_canvas = Tensor::from_vec(
                    d_canvas_batch.data()[row * canvas_dim..(row + 1) * canvas_dim].to_vec(),
                );
                let g_p = prompt.backward(&images[i], &d_canvas)?;
                prompt_grad = prompt_grad.add(&g_p)?;
            }
            prompt_params.accumulate_grad("prompt", &prompt_grad)?;
            adam.step(&mut prompt_params)?;
            prompt.set_params(prompt_params.value("prompt")?.data())?;
        }
        curve.push(epoch_loss / batches.max(1.0));
    }

    Ok(FooOutcome {
        prompt,
        map,
        loss_curve: curve,
    })
}

/// Cost-free inference: argmax of the mapped scores for one image.
/// Deterministic, lowest class index on ties, zero API calls.
pub fn infer(
    local: &LocalModel,
    prompt: &Prompt,
    map: &LabelMap,
    image: &Tensor,
) -> Result<usize> {
    let logits = local.forward_one(&prompt.apply(image)?)?;
    let probs = softmax(&logits)?;
    Ok(map.map_output(&probs)?.argmax())
}

/// Accuracy of the trained artifacts over a labeled set.
pub fn test_accuracy(
    local: &LocalModel,
    prompt: &Prompt,
    map: &LabelMap,
    images: &[Tensor],
    labels: &[usize],
) -> Result<f64> {
    let mut correct = 0usize;
    for (img, &y) in images.iter().zip(labels) {
        if infer(local, prompt, map, img)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, Classifier};
    use rand::Rng;

    fn geom() -> PromptGeometry {
        PromptGeometry {
            canvas_h: 6,
            canvas_w: 6,
            image_h: 4,
            image_w: 4,
            channels: 1,
        }
    }

    /// Tiny separable target set plus a local model with a trained head
    /// over the shared (identity) label space.
    fn toy_setup(seed: u64) -> (LocalModel, Vec<Tensor>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..24 {
            let y = i % 2;
            let mut v = vec![0.2; 16];
            for (j, x) in v.iter_mut().enumerate() {
                if (j % 2 == y) && (j < 8) {
                    *x = 0.9;
                }
                *x += rng.gen_range(-0.02..0.02);
            }
            images.push(Tensor::from_vec(v));
            labels.push(y);
        }
        // Train a small classifier on embedded images, then reuse its
        // hidden stack as the local encoder with a probe head.
        let embedded: Vec<Tensor> = images
            .iter()
            .map(|img| crate::reprogram::embed_center(img, &geom()).unwrap())
            .collect();
        let (trained, _) = crate::models::train_classifier(
            &embedded,
            &labels,
            &Arch::new(36, vec![12], 2),
            &crate::models::TrainConfig {
                epochs: 30,
                batch_size: 8,
                lr: 1e-2,
            },
            seed,
        )
        .unwrap();
        let mut local = LocalModel::from_classifier(&trained, 2, &mut rng).unwrap();
        // Copy the trained output layer into the head so the local model
        // starts from a sensible probe.
        let w = trained.params().value("layer1.w").unwrap().clone();
        let b = trained.params().value("layer1.b").unwrap().clone();
        local.params_mut().set_value("head.w", w).unwrap();
        local.params_mut().set_value("head.b", b).unwrap();
        (local, images, labels)
    }

    #[test]
    fn degenerate_schedule_reduces_plain_cross_entropy() {
        let (local, images, labels) = toy_setup(71);
        let cfg = VrConfig {
            epochs: 20,
            refresh_interval: 21, // never refresh after the initial fit
            batch_size: 8,
            seed: 71,
            ..VrConfig::default()
        };
        let out = train_prompt_foo(
            &local,
            &images,
            &labels,
            2,
            MapKind::Identity,
            geom(),
            &cfg,
        )
        .unwrap();
        assert!(
            out.loss_curve.last().unwrap() <= out.loss_curve.first().unwrap(),
            "loss did not decrease: {:?}",
            out.loss_curve
        );
    }

    #[test]
    fn separable_toy_target_reaches_full_train_accuracy() {
        let (local, images, labels) = toy_setup(7);
        let cfg = VrConfig {
            epochs: 50,
            batch_size: 8,
            seed: 7,
            ..VrConfig::default()
        };
        let out =
            train_prompt_foo(&local, &images, &labels, 2, MapKind::Identity, geom(), &cfg)
                .unwrap();
        let acc = test_accuracy(&local, &out.prompt, &out.map, &images, &labels).unwrap();
        assert!(acc >= 0.999, "train accuracy {acc}");
    }

    #[test]
    fn head_stays_frozen_during_prompt_training() {
        let (local, images, labels) = toy_setup(13);
        let before = local.params().checksum();
        let cfg = VrConfig {
            epochs: 5,
            batch_size: 8,
            seed: 13,
            ..VrConfig::default()
        };
        train_prompt_foo(&local, &images, &labels, 2, MapKind::Identity, geom(), &cfg).unwrap();
        assert_eq!(before, local.params().checksum());
    }

    #[test]
    fn identity_prompt_and_map_is_plain_local_prediction() {
        let (local, images, _) = toy_setup(19);
        let prompt = Prompt::zeroed(PromptKind::Padding, geom()).unwrap();
        let map = LabelMap::Identity { classes: 2 };
        for img in images.iter().take(5) {
            let direct = local
                .forward_one(&crate::reprogram::embed_center(img, &geom()).unwrap())
                .unwrap()
                .argmax();
            assert_eq!(infer(&local, &prompt, &map, img).unwrap(), direct);
        }
    }

    #[test]
    fn batch_inference_matches_per_image() {
        let (local, images, labels) = toy_setup(23);
        let cfg = VrConfig {
            epochs: 3,
            batch_size: 8,
            seed: 23,
            ..VrConfig::default()
        };
        let out =
            train_prompt_foo(&local, &images, &labels, 2, MapKind::Identity, geom(), &cfg)
                .unwrap();
        let singles: Vec<usize> = images
            .iter()
            .map(|img| infer(&local, &out.prompt, &out.map, img).unwrap())
            .collect();
        let again: Vec<usize> = images
            .iter()
            .map(|img| infer(&local, &out.prompt, &out.map, img).unwrap())
            .collect();
        assert_eq!(singles, again);
    }

    #[test]
    fn flm_map_path_trains_with_disjoint_widths() {
        // Head width 4 (source space), 2 target classes, flm bridge.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let pretrained = Classifier::init(Arch::new(36, vec![10], 4), &mut rng);
        let mut local = LocalModel::from_classifier(&pretrained, 4, &mut rng).unwrap();
        local
            .params_mut()
            .set_value("head.w", Tensor::uniform(vec![10, 4], -0.7, 0.7, &mut rng))
            .unwrap();
        let (_, images, labels) = toy_setup(29);
        let cfg = VrConfig {
            epochs: 8,
            batch_size: 8,
            refresh_interval: 3,
            seed: 29,
            ..VrConfig::default()
        };
        let out = train_prompt_foo(&local, &images, &labels, 2, MapKind::Flm, geom(), &cfg)
            .unwrap();
        assert_eq!(out.map.target_width(), 2);
        assert_eq!(out.map.source_width(), 4);
        assert!(out.loss_curve.iter().all(|v| v.is_finite()));
    }
}
