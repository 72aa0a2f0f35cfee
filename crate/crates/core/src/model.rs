//! Score functions `R^d -> R^C`: a linear layer, or an MLP with ReLU
//! hidden layers. Class probabilities come from the softmax link.
//!
//! Parameters live in one flat vector, layer by layer, each layer as its
//! weight matrix (`out x in`, row-major) followed by its bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bags::Dataset;
use crate::error::{Error, Result};
use crate::simplex::min_argmax;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    SoftmaxLinear { input_dim: usize, classes: usize },
    Mlp { input_dim: usize, hidden: Vec<usize>, classes: usize },
}

impl ClassifierKind {
    /// Linear when `hidden` is empty, otherwise an MLP.
    pub fn from_hidden(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        if hidden.is_empty() {
            ClassifierKind::SoftmaxLinear { input_dim, classes }
        } else {
            ClassifierKind::Mlp {
                input_dim,
                hidden: hidden.to_vec(),
                classes,
            }
        }
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        match self {
            ClassifierKind::SoftmaxLinear { input_dim, classes } => vec![*input_dim, *classes],
            ClassifierKind::Mlp {
                input_dim,
                hidden,
                classes,
            } => std::iter::once(*input_dim)
                .chain(hidden.iter().copied())
                .chain(std::iter::once(*classes))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths()[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths().last().expect("at least two widths")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    kind: ClassifierKind,
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass, input first, scores last.
pub struct Trace {
    layers: Vec<Vec<f64>>,
}

impl Trace {
    pub fn scores(&self) -> &[f64] {
        self.layers.last().expect("non-empty trace")
    }
}

impl Classifier {
    /// Linear models start at zero. MLP weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(kind: ClassifierKind, seed: u64) -> Result<Classifier> {
        let widths = kind.widths();
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!("zero-width layer in {widths:?}")));
        }
        if kind.classes() < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let count: usize = widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        let params = match kind {
            ClassifierKind::SoftmaxLinear { .. } => vec![0.0; count],
            ClassifierKind::Mlp { .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut params = Vec::with_capacity(count);
                for w in widths.windows(2) {
                    let bound = 1.0 / (w[0] as f64).sqrt();
                    for _ in 0..w[1] * (w[0] + 1) {
                        params.push(rng.random_range(-bound..bound));
                    }
                }
                params
            }
        };
        Ok(Classifier { kind, widths, params })
    }

    pub fn kind(&self) -> &ClassifierKind {
        &self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("widths")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut layers = vec![x.to_vec()];
        let mut offset = 0;
        let last = self.widths.len() - 2;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let input = &layers[l];
            let weights = &self.params[offset..offset + fan_out * fan_in];
            let bias = &self.params[offset + fan_out * fan_in..offset + fan_out * (fan_in + 1)];
            let mut out: Vec<f64> = weights
                .chunks_exact(fan_in)
                .zip(bias)
                .map(|(row, b)| row.iter().zip(input).map(|(a, v)| a * v).sum::<f64>() + b)
                .collect();
            if l < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            layers.push(out);
            offset += fan_out * (fan_in + 1);
        }
        Ok(Trace { layers })
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.layers.pop().expect("scores"))
    }

    /// Adds `d(scores)^T * d(scores)/d(params)` into `grad`.
    pub fn backward(&self, trace: &Trace, dscores: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let mut delta = dscores.to_vec();
        let mut offset = self.params.len();
        for l in (0..self.widths.len() - 1).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            offset -= fan_out * (fan_in + 1);
            let input = &trace.layers[l];
            let (gw, gb) = grad[offset..offset + fan_out * (fan_in + 1)].split_at_mut(fan_out * fan_in);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, &v) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                    *g += d * v;
                }
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[offset..offset + fan_out * fan_in];
            let mut next = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                for (n, &w) in next.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                    *n += d * w;
                }
            }
            // ReLU: pass gradient only where the unit was active
            for (n, &a) in next.iter_mut().zip(input) {
                if a <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }

    /// Lowest-index class with the largest score.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(min_argmax(&self.scores(x)?))
    }

    /// Versioned text form: header lines, then one parameter per line with 17 significant digits.
    pub fn to_text(&self) -> String {
        let kind = match self.kind {
            ClassifierKind::SoftmaxLinear { .. } => "softmax-linear",
            ClassifierKind::Mlp { .. } => "mlp",
        };
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        let mut out = format!(
            "llpfc-classifier 1\nkind {kind}\nwidths {}\nparams {}\n",
            widths.join(" "),
            self.params.len()
        );
        for p in &self.params {
            out.push_str(&format!("{p:.16e}\n"));
        }
        out
    }

    /// Parses [`Classifier::to_text`] output. Lines starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Classifier> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
        let mut field = |name: &str| -> Result<(usize, String)> {
            let (n, line) = lines.next().ok_or_else(|| parse_err(0, format!("missing {name} line")))?;
            let rest = line
                .strip_prefix(name)
                .ok_or_else(|| parse_err(n, format!("expected {name:?}")))?;
            Ok((n, rest.trim().to_string()))
        };
        let (n, version) = field("llpfc-classifier")?;
        if version != "1" {
            return Err(parse_err(n, format!("unsupported version {version}")));
        }
        let (_, kind_name) = field("kind")?;
        let (n, widths_text) = field("widths")?;
        let widths = widths_text
            .split_whitespace()
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(n, e.to_string()))?;
        if widths.len() < 2 {
            return Err(parse_err(n, "need at least two widths".into()));
        }
        let (input_dim, classes) = (widths[0], *widths.last().expect("two widths"));
        let kind = match kind_name.as_str() {
            "softmax-linear" if widths.len() == 2 => ClassifierKind::SoftmaxLinear { input_dim, classes },
            "mlp" if widths.len() > 2 => ClassifierKind::Mlp {
                input_dim,
                hidden: widths[1..widths.len() - 1].to_vec(),
                classes,
            },
            other => return Err(parse_err(1, format!("kind {other:?} does not match widths"))),
        };
        let (n, count) = field("params")?;
        let count: usize = count.parse().map_err(|_| parse_err(n, format!("bad count {count:?}")))?;
        let mut clf = Classifier::init(kind, 0)?;
        if clf.params.len() != count {
            return Err(parse_err(n, format!("widths imply {} params, header says {count}", clf.params.len())));
        }
        for slot in clf.params.iter_mut() {
            let (n, line) = lines.next().ok_or_else(|| parse_err(0, "truncated parameter list".into()))?;
            *slot = line
                .trim()
                .parse()
                .map_err(|_| parse_err(n, format!("bad parameter {line:?}")))?;
        }
        Ok(clf)
    }
}

fn parse_err(line: usize, message: String) -> Error {
    Error::Parse {
        location: format!("line {}", line + 1),
        message,
    }
}

/// Fraction of rows of `ds` classified correctly.
pub fn evaluate(clf: &Classifier, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let labels = ds.labels();
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if clf.predict(ds.features(i))? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Accuracy over the listed rows only.
pub fn evaluate_rows(clf: &Classifier, ds: &Dataset, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to evaluate".into()));
    }
    let mut correct = 0usize;
    for &i in rows {
        if clf.predict(ds.features(i))? == ds.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / rows.len() as f64)
}
