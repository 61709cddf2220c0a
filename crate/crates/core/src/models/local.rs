//! Frozen feature encoder plus a trainable linear head, the primed proxy
//! for the service model.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::numeric::{Graph, NodeId, ParamSet, Tensor};

/// Local model: the hidden stack of a pretrained classifier (frozen) with
/// a fresh linear head on top. The head width matches whatever space the
/// model is primed against — the service label space, or the downstream
/// space for linear probing.
#[derive(Clone, Debug)]
pub struct LocalModel {
    input_dim: usize,
    hidden: Vec<usize>,
    head_width: usize,
    params: ParamSet,
}

impl LocalModel {
    /// Strip the final layer of a pretrained classifier, freeze what
    /// remains, and attach a zero-initialized head of the given width.
    pub fn from_classifier(
        pretrained: &Classifier,
        head_width: usize,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let arch = pretrained.arch();
        if arch.hidden.is_empty() {
            return Err(Error::Config(
                "encoder needs at least one hidden layer".into(),
            ));
        }
        let mut params = ParamSet::new();
        for li in 0..arch.hidden.len() {
            let w = pretrained.params().value(&format!("layer{li}.w"))?.clone();
            let b = pretrained.params().value(&format!("layer{li}.b"))?.clone();
            params.insert(&format!("enc{li}.w"), w, false);
            params.insert(&format!("enc{li}.b"), b, false);
        }
        let d_enc = *arch.hidden.last().unwrap();
        params.insert("head.w", Tensor::zeros(vec![d_enc, head_width]), true);
        params.insert("head.b", Tensor::zeros(vec![head_width]), true);
        Ok(LocalModel {
            input_dim: arch.input_dim,
            hidden: arch.hidden.clone(),
            head_width,
            params,
        })
    }

    pub fn from_parts(
        input_dim: usize,
        hidden: Vec<usize>,
        head_width: usize,
        params: ParamSet,
    ) -> Self {
        LocalModel {
            input_dim,
            hidden,
            head_width,
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn encoder_dim(&self) -> usize {
        *self.hidden.last().unwrap()
    }

    pub fn head_width(&self) -> usize {
        self.head_width
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Hash of the frozen encoder blocks only.
    pub fn encoder_checksum(&self) -> u64 {
        let mut enc = ParamSet::new();
        for li in 0..self.hidden.len() {
            for suffix in ["w", "b"] {
                let name = format!("enc{li}.{suffix}");
                enc.insert(&name, self.params.value(&name).unwrap().clone(), false);
            }
        }
        enc.checksum()
    }

    /// Swap in a fresh zero head of a new width (used by linear probing).
    pub fn reset_head(&mut self, head_width: usize) {
        let d_enc = self.encoder_dim();
        let mut params = ParamSet::new();
        for li in 0..self.hidden.len() {
            for suffix in ["w", "b"] {
                let name = format!("enc{li}.{suffix}");
                params.insert(&name, self.params.value(&name).unwrap().clone(), false);
            }
        }
        params.insert("head.w", Tensor::zeros(vec![d_enc, head_width]), true);
        params.insert("head.b", Tensor::zeros(vec![head_width]), true);
        self.params = params;
        self.head_width = head_width;
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim {
            return Err(Error::InvalidInput(format!(
                "local model expects [B, {}], got {:?}",
                self.input_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Encoder features for a batch: `[B, D] -> [B, d_enc]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut cur = x.clone();
        for li in 0..self.hidden.len() {
            let w = self.params.value(&format!("enc{li}.w"))?;
            let b = self.params.value(&format!("enc{li}.b"))?;
            let mut y = cur.matmul(w)?;
            let n = b.numel();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % n];
                *v = v.tanh();
            }
            cur = y;
        }
        Ok(cur)
    }

    /// Batched logits: `head(encoder(x))`.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.features(x)?;
        let w = self.params.value("head.w")?;
        let b = self.params.value("head.b")?;
        let mut y = feats.matmul(w)?;
        let n = b.numel();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % n];
        }
        Ok(y)
    }

    /// Logits for one flattened image.
    pub fn forward_one(&self, image: &Tensor) -> Result<Tensor> {
        let x = Tensor::new(vec![1, image.numel()], image.data().to_vec())?;
        let out = self.forward_batch(&x)?;
        Ok(Tensor::from_vec(out.data().to_vec()))
    }

    /// Recorded forward pass through frozen encoder and trainable head.
    /// The returned bindings cover every parameter; gradients routed
    /// through [`ParamSet::accumulate_grad`] are dropped for the frozen
    /// encoder entries.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        let mut bindings = Vec::new();
        let mut cur = x;
        for li in 0..self.hidden.len() {
            let wname = format!("enc{li}.w");
            let bname = format!("enc{li}.b");
            let w = g.input(self.params.value(&wname)?.clone())?;
            let b = g.input(self.params.value(&bname)?.clone())?;
            bindings.push((wname, w));
            bindings.push((bname, b));
            let mm = g.matmul(cur, w)?;
            let lin = g.add_row_broadcast(mm, b)?;
            cur = g.tanh(lin);
        }
        let w = g.input(self.params.value("head.w")?.clone())?;
        let b = g.input(self.params.value("head.b")?.clone())?;
        bindings.push(("head.w".to_string(), w));
        bindings.push(("head.b".to_string(), b));
        let mm = g.matmul(cur, w)?;
        let logits = g.add_row_broadcast(mm, b)?;
        Ok((logits, bindings))
    }

    /// Head-only forward over precomputed features, for the priming stage
    /// where the encoder is frozen and inputs are fixed.
    pub fn head_graph(
        &self,
        g: &mut Graph,
        features: NodeId,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        let w = g.input(self.params.value("head.w")?.clone())?;
        let b = g.input(self.params.value("head.b")?.clone())?;
        let mm = g.matmul(features, w)?;
        let logits = g.add_row_broadcast(mm, b)?;
        Ok((
            logits,
            vec![("head.w".to_string(), w), ("head.b".to_string(), b)],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, Classifier};
    use crate::numeric::{finite_difference_grad, max_relative_error, softmax};
    use rand::SeedableRng;

    fn make_local(seed: u64) -> LocalModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pretrained = Classifier::init(Arch::new(8, vec![6], 4), &mut rng);
        LocalModel::from_classifier(&pretrained, 4, &mut rng).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let local = make_local(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::uniform(vec![8], 0.0, 1.0, &mut rng);
        let logits = local.forward_one(&img).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = softmax(&logits).unwrap();
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn encoder_gradient_slots_stay_zero() {
        let mut local = make_local(7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        local
            .params_mut()
            .set_value("head.w", Tensor::uniform(vec![6, 4], -0.5, 0.5, &mut rng))
            .unwrap();
        let batch = Tensor::uniform(vec![3, 8], 0.0, 1.0, &mut rng);

        let mut g = Graph::new();
        let x = g.input(batch).unwrap();
        let (logits, bindings) = local.forward_graph(&mut g, x).unwrap();
        let loss = g.cross_entropy_mean(logits, vec![0, 1, 2]).unwrap();
        let grads = g.backward(loss).unwrap();
        for (name, node) in &bindings {
            if let Some(grad) = grads.try_get(*node) {
                local.params_mut().accumulate_grad(name, grad).unwrap();
            }
        }
        for p in local.params().iter() {
            if p.name.starts_with("enc") {
                assert!(p.grad.data().iter().all(|&v| v == 0.0), "{} got grad", p.name);
            }
        }
        // The head did receive gradient.
        assert!(local
            .params()
            .get("head.w")
            .unwrap()
            .grad
            .data()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn image_gradient_matches_finite_differences() {
        let mut local = make_local(11);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        local
            .params_mut()
            .set_value("head.w", Tensor::uniform(vec![6, 4], -0.5, 0.5, &mut rng))
            .unwrap();
        let image = Tensor::uniform(vec![8], 0.2, 0.8, &mut rng);

        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(vec![1, 8], image.data().to_vec()).unwrap())
            .unwrap();
        let (logits, _) = local.forward_graph(&mut g, x).unwrap();
        let loss = g.cross_entropy_mean(logits, vec![2]).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = vec![("img".to_string(), grads.get(x, &g))];

        let mut img_params = ParamSet::new();
        img_params.insert("img", Tensor::new(vec![1, 8], image.data().to_vec()).unwrap(), true);
        let fd = finite_difference_grad(
            |ps| {
                let mut g = Graph::new();
                let x = g.input(ps.value("img")?.clone())?;
                let (logits, _) = local.forward_graph(&mut g, x)?;
                let loss = g.cross_entropy_mean(logits, vec![2])?;
                g.value(loss).item()
            },
            &img_params,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &fd);
        assert!(err < 1e-4, "image gradient error {err}");
    }

    #[test]
    fn head_width_can_differ_from_pretraining() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let pretrained = Classifier::init(Arch::new(8, vec![6], 4), &mut rng);
        let local = LocalModel::from_classifier(&pretrained, 9, &mut rng).unwrap();
        assert_eq!(local.head_width(), 9);
        let img = Tensor::uniform(vec![8], 0.0, 1.0, &mut rng);
        assert_eq!(local.forward_one(&img).unwrap().numel(), 9);
    }
}
