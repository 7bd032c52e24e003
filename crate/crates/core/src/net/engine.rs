use rayon::prelude::*;

use super::{layers, ActivationRecord, Network, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    /// Pre-softmax class scores; `logits[c]` is the score explained for class `c`.
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

impl ClassScore {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = softmax(&logits);
        let mut predicted = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[predicted] {
                predicted = i;
            }
        }
        ClassScore {
            logits,
            probabilities,
            predicted,
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Parameter gradients laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<Params>>,
    /// Mean cross-entropy over the samples the gradients were taken for.
    pub loss: f64,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.layers.iter().flatten() {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }
}

type ParamGrad = Option<(Vec<f64>, Vec<f64>)>;

impl Network {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.spec.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "input shape {:?} does not match network input {:?}",
                x.shape(),
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    // Fills `acts[start + 1..]`; `acts[..=start]` must already be present.
    fn run_from(&self, acts: &mut Vec<Tensor>, start: usize) -> Result<()> {
        acts.truncate(start + 1);
        for i in start..self.spec.layers.len() {
            let layer = &self.spec.layers[i];
            let skip = self.skip_from[i].map(|s| &acts[s]);
            let out = layers::forward(
                &layer.kind,
                self.params[i].as_ref(),
                &acts[i],
                skip,
                &self.shapes[i + 1],
            );
            if let Some(v) = out.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "layer '{}' produced non-finite value {v}",
                    layer.name
                )));
            }
            acts.push(Tensor::from_raw(self.shapes[i + 1].clone(), out));
        }
        Ok(())
    }

    fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        acts.push(x.clone());
        self.run_from(&mut acts, 0)?;
        Ok(acts)
    }

    pub fn forward(&self, x: &Tensor) -> Result<ClassScore> {
        let acts = self.forward_all(x)?;
        Ok(ClassScore::from_logits(acts.last().unwrap().data().to_vec()))
    }

    /// Runs `x` forward, substitutes the output of `layer_name` with
    /// `replacement`, and continues to the logits.
    pub fn forward_from_layer(
        &self,
        x: &Tensor,
        layer_name: &str,
        replacement: &Tensor,
    ) -> Result<ClassScore> {
        let idx = self
            .spec
            .layer_index(layer_name)
            .ok_or_else(|| Error::Argument(format!("no layer named '{layer_name}'")))?;
        if replacement.shape() != self.shapes[idx + 1].as_slice() {
            return Err(Error::shape(format!(
                "replacement {:?} for layer '{layer_name}' with output {:?}",
                replacement.shape(),
                self.shapes[idx + 1]
            )));
        }
        let mut acts = self.forward_all(x)?;
        acts[idx + 1] = replacement.clone();
        self.run_from(&mut acts, idx + 1)?;
        Ok(ClassScore::from_logits(acts.last().unwrap().data().to_vec()))
    }

    /// Forward pass on `x` multiplied by a spatial `[H, W]` mask broadcast
    /// over channels.
    pub fn masked_forward(&self, x: &Tensor, mask: &Tensor) -> Result<ClassScore> {
        self.check_input(x)?;
        let (c, h, w) = x.dims3()?;
        if mask.shape() != [h, w] {
            return Err(Error::shape(format!(
                "mask {:?} does not match input spatial size {h}x{w}",
                mask.shape()
            )));
        }
        let m = mask.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * m[i % (h * w)])
            .collect();
        self.forward(&Tensor::new(vec![c, h, w], data)?)
    }

    // Reverse pass from `seed` (gradient at the logits). Returns the gradient
    // at each requested position and, optionally, the parameter gradients.
    fn reverse(
        &self,
        acts: &[Tensor],
        seed: Vec<f64>,
        capture: &[usize],
        want_params: bool,
    ) -> (Vec<Vec<f64>>, Vec<ParamGrad>) {
        let n = self.spec.layers.len();
        let mut extra: Vec<Option<Vec<f64>>> = vec![None; n + 1];
        let mut captured = vec![Vec::new(); capture.len()];
        let mut pgrads: Vec<ParamGrad> = vec![None; n];
        let mut g = seed;
        for i in (0..n).rev() {
            let pos = i + 1;
            if let Some(e) = extra[pos].take() {
                g.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
            }
            if let Some(slot) = capture.iter().position(|&p| p == pos) {
                captured[slot] = g.clone();
            }
            if let Some(s) = self.skip_from[i] {
                match &mut extra[s] {
                    Some(e) => e.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g.clone()),
                }
            }
            let layer = &self.spec.layers[i];
            let (grad_in, pg) = layers::backward(
                &layer.kind,
                self.params[i].as_ref(),
                &acts[i],
                &g,
                &self.shapes[pos],
                want_params && self.params[i].is_some(),
            );
            pgrads[i] = pg;
            g = grad_in;
        }
        (captured, pgrads)
    }

    /// One forward pass plus one reverse pass seeded with `d logit[c] = 1`,
    /// capturing activations and gradients at every tagged layer, shallow to
    /// deep.
    pub fn explain_pass(
        &self,
        x: &Tensor,
        class_index: usize,
    ) -> Result<(ClassScore, Vec<ActivationRecord>)> {
        if class_index >= self.spec.class_count {
            return Err(Error::Range(format!(
                "class index {class_index} out of range for {} classes",
                self.spec.class_count
            )));
        }
        let acts = self.forward_all(x)?;
        let score = ClassScore::from_logits(acts.last().unwrap().data().to_vec());
        let tagged: Vec<usize> = (0..self.spec.layers.len())
            .filter(|&i| self.spec.layers[i].tagged)
            .collect();
        let positions: Vec<usize> = tagged.iter().map(|i| i + 1).collect();
        let mut seed = vec![0.0; self.spec.class_count];
        seed[class_index] = 1.0;
        let (grads, _) = self.reverse(&acts, seed, &positions, false);
        let records = tagged
            .iter()
            .zip(grads)
            .map(|(&i, g)| {
                let layer = &self.spec.layers[i];
                let gradients = Tensor::new(self.shapes[i + 1].clone(), g)?;
                ActivationRecord::new(
                    layer.name.clone(),
                    layer.block.expect("tagged layers carry a block"),
                    acts[i + 1].clone(),
                    gradients,
                    class_index,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((score, records))
    }

    /// Cross-entropy gradients of every parameter for a single labelled input.
    pub fn backward_weights(&self, x: &Tensor, label: usize) -> Result<Gradients> {
        self.batch_gradients(&[(x, label)])
    }

    /// Gradients of the mean cross-entropy over `samples`. Per-sample passes
    /// may run in parallel; they are summed in sample order.
    pub fn batch_gradients(&self, samples: &[(&Tensor, usize)]) -> Result<Gradients> {
        if samples.is_empty() {
            return Err(Error::Argument("no samples to take gradients over".into()));
        }
        let per_sample: Vec<_> = samples
            .par_iter()
            .map(|&(x, label)| self.sample_gradients(x, label))
            .collect::<Result<_>>()?;
        let mut sums: Vec<ParamGrad> = vec![None; self.spec.layers.len()];
        let mut loss = 0.0;
        for (l, pg) in per_sample {
            loss += l;
            for (acc, g) in sums.iter_mut().zip(pg) {
                match (acc, g) {
                    (Some((aw, ab)), Some((gw, gb))) => {
                        aw.iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
                        ab.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
                    }
                    (slot @ None, g) => *slot = g,
                    _ => {}
                }
            }
        }
        self.finish_gradients(sums, loss, samples.len())
    }

    fn sample_gradients(&self, x: &Tensor, label: usize) -> Result<(f64, Vec<ParamGrad>)> {
        if label >= self.spec.class_count {
            return Err(Error::Range(format!(
                "label {label} out of range for {} classes",
                self.spec.class_count
            )));
        }
        let acts = self.forward_all(x)?;
        let probs = softmax(acts.last().unwrap().data());
        let loss = -probs[label].ln();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let mut seed = probs;
        seed[label] -= 1.0;
        let (_, pg) = self.reverse(&acts, seed, &[], true);
        Ok((loss, pg))
    }

    fn finish_gradients(
        &self,
        sums: Vec<ParamGrad>,
        loss: f64,
        count: usize,
    ) -> Result<Gradients> {
        let n = count as f64;
        let layers = self
            .spec
            .layers
            .iter()
            .zip(sums)
            .map(|(layer, g)| match (layer.kind.param_shapes(), g) {
                (Some((ws, bs)), Some((gw, gb))) => Ok(Some(Params {
                    weight: Tensor::new(ws, gw.into_iter().map(|v| v / n).collect())?,
                    bias: Tensor::new(bs, gb.into_iter().map(|v| v / n).collect())?,
                })),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients {
            layers,
            loss: loss / n,
        })
    }
}
