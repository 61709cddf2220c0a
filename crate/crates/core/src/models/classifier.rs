//! Multilayer perceptron over flattened pixels, with tanh activations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Adam, AdamConfig, Graph, NodeId, ParamSet, Tensor};

/// Architecture descriptor: layer widths over a flattened H*W*C input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Arch {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Arch {
            input_dim,
            hidden,
            classes,
        }
    }

    /// Widths of consecutive linear layers, input to output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.classes));
        dims
    }
}

/// MLP classifier. Forward is deterministic; output width equals the
/// class count.
#[derive(Clone, Debug)]
pub struct Classifier {
    arch: Arch,
    params: ParamSet,
}

impl Classifier {
    /// Fresh classifier with uniform Xavier-style init.
    pub fn init(arch: Arch, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        for (li, (fan_in, fan_out)) in arch.layer_dims().iter().enumerate() {
            let bound = (6.0 / (*fan_in + *fan_out) as f64).sqrt();
            params.insert(
                &format!("layer{li}.w"),
                Tensor::uniform(vec![*fan_in, *fan_out], -bound, bound, rng),
                true,
            );
            params.insert(
                &format!("layer{li}.b"),
                Tensor::zeros(vec![*fan_out]),
                true,
            );
        }
        Classifier { arch, params }
    }

    pub fn from_parts(arch: Arch, params: ParamSet) -> Self {
        Classifier { arch, params }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn layer_count(&self) -> usize {
        self.arch.hidden.len() + 1
    }

    /// Plain batched forward: `[B, D] -> [B, K]` logits.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.arch.input_dim {
            return Err(Error::InvalidInput(format!(
                "classifier expects [B, {}] input, got {:?}",
                self.arch.input_dim,
                x.shape()
            )));
        }
        let mut cur = x.clone();
        let layers = self.layer_count();
        for li in 0..layers {
            let w = self.params.value(&format!("layer{li}.w"))?;
            let b = self.params.value(&format!("layer{li}.b"))?;
            let mut y = cur.matmul(w)?;
            let n = b.numel();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % n];
            }
            if li + 1 < layers {
                for v in y.data_mut() {
                    *v = v.tanh();
                }
            }
            cur = y;
        }
        Ok(cur)
    }

    /// Logits for one flattened image.
    pub fn forward_one(&self, image: &Tensor) -> Result<Tensor> {
        let x = Tensor::new(vec![1, image.numel()], image.data().to_vec())?;
        let out = self.forward_batch(&x)?;
        Ok(Tensor::from_vec(out.data().to_vec()))
    }

    /// Recorded forward pass. Returns the logits node and `(name, leaf)`
    /// bindings for every parameter so callers can route gradients back
    /// into the [`ParamSet`].
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        let mut bindings = Vec::new();
        let mut cur = x;
        let layers = self.layer_count();
        for li in 0..layers {
            let wname = format!("layer{li}.w");
            let bname = format!("layer{li}.b");
            let w = g.input(self.params.value(&wname)?.clone())?;
            let b = g.input(self.params.value(&bname)?.clone())?;
            bindings.push((wname, w));
            bindings.push((bname, b));
            let mm = g.matmul(cur, w)?;
            let lin = g.add_row_broadcast(mm, b)?;
            cur = if li + 1 < layers { g.tanh(lin) } else { lin };
        }
        Ok((cur, bindings))
    }

    /// Classification accuracy on a labeled set.
    pub fn accuracy(&self, images: &[Tensor], labels: &[usize]) -> Result<f64> {
        let mut correct = 0usize;
        for (img, &y) in images.iter().zip(labels) {
            if self.forward_one(img)?.argmax() == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_train_accuracy: f64,
    pub loss_curve: Vec<f64>,
}

/// Train a classifier with Adam on mean cross-entropy. Deterministic
/// given the seed; diverging loss aborts with the epoch index.
pub fn train_classifier(
    images: &[Tensor],
    labels: &[usize],
    arch: &Arch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Classifier, TrainSummary)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidInput(
            "training set empty or labels mismatched".into(),
        ));
    }
    if labels.iter().any(|&y| y >= arch.classes) {
        return Err(Error::Index("label exceeds class count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Classifier::init(arch.clone(), &mut rng);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), model.params());

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = stack_images(images, chunk)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let mut g = Graph::new();
            let x = g.input(batch)?;
            let (logits, bindings) = model.forward_graph(&mut g, x)?;
            let loss = g.cross_entropy_mean(logits, batch_labels)?;
            let loss_val = g.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged at epoch {epoch}"
                )));
            }
            epoch_loss += loss_val;
            batches += 1.0;

            let grads = g.backward(loss)?;
            for (name, node) in &bindings {
                if let Some(grad) = grads.try_get(*node) {
                    model.params_mut().accumulate_grad(name, grad)?;
                }
            }
            adam.step(model.params_mut())?;
        }
        curve.push(epoch_loss / batches.max(1.0));
    }

    let final_train_accuracy = model.accuracy(images, labels)?;
    Ok((
        model,
        TrainSummary {
            final_train_accuracy,
            loss_curve: curve,
        },
    ))
}

/// Fisher-Yates with the shared deterministic rng.
pub(crate) fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Gather selected flattened images into a `[B, D]` batch.
pub(crate) fn stack_images(images: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let d = images[idx[0]].numel();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if images[i].numel() != d {
            return Err(Error::InvalidInput("ragged image sizes in batch".into()));
        }
        data.extend_from_slice(images[i].data());
    }
    Tensor::new(vec![idx.len(), d], data)
}
