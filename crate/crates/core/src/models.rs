//! Binary classifiers over binary feature vectors: logistic regression and a
//! one-hidden-layer relu network, both with a sigmoid output and mean binary
//! cross-entropy loss.

use rand::Rng;

use crate::rng;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Logistic,
    /// One relu hidden layer of the given width.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
}

/// One named, row-major block of a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector plus the block layout it was built from. This is the
/// unit exchanged and averaged between sites.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    values: Vec<T>,
    layout: Vec<Block>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(values: Vec<T>, layout: Vec<Block>) -> Result<Self> {
        let expected: usize = layout.iter().map(Block::len).sum();
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "{} values for a layout of {expected}",
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<Block>) -> Self {
        let n = layout.iter().map(Block::len).sum();
        Self {
            values: vec![T::zero(); n],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn layout(&self) -> &[Block] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of the named block.
    pub fn block(&self, name: &str) -> Option<&[T]> {
        let mut start = 0;
        for b in &self.layout {
            if b.name == name {
                return Some(&self.values[start..start + b.len()]);
            }
            start += b.len();
        }
        None
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layout == other.layout
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }

    pub fn l2_norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            values: self.values.iter().map(|&v| v * c).collect(),
            layout: self.layout.clone(),
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: T, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + c * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + b;
        }
        Ok(())
    }
}

/// Rows of binary features with one binary label each, stored row-major.
///
/// Used both for training batches and for whole partitions; the gradient
/// routines reject an empty batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    features: Vec<u8>,
    labels: Vec<u8>,
    width: usize,
}

impl Batch {
    pub fn new(features: Vec<u8>, labels: Vec<u8>, width: usize) -> Result<Self> {
        if features.len() != labels.len() * width {
            return Err(Error::Dimension(format!(
                "{} feature entries for {} rows of width {width}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().chain(&labels).any(|&v| v > 1) {
            return Err(Error::InvalidParam(
                "features and labels must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            features,
            labels,
            width,
        })
    }

    pub fn empty(width: usize) -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            width,
        }
    }

    pub(crate) fn push_unchecked(&mut self, row: &[u8], label: u8) {
        debug_assert_eq!(row.len(), self.width);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut out = Batch::empty(self.width);
        out.features.reserve(indices.len() * self.width);
        out.labels.reserve(indices.len());
        for &i in indices {
            out.push_unchecked(self.row(i), self.labels[i]);
        }
        out
    }

    /// Rows of every batch in turn. All batches must share one width.
    pub fn concat(batches: &[&Batch]) -> Result<Batch> {
        let width = batches.first().map_or(0, |b| b.width);
        if let Some(b) = batches.iter().find(|b| b.width != width) {
            return Err(Error::Dimension(format!(
                "cannot pool width {} with width {width}",
                b.width
            )));
        }
        Ok(Batch {
            features: batches.iter().flat_map(|b| b.features.iter().copied()).collect(),
            labels: batches.iter().flat_map(|b| b.labels.iter().copied()).collect(),
            width,
        })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }
}

pub(crate) fn sigmoid<T: Scalar>(s: T) -> T {
    if s >= T::zero() {
        T::one() / (T::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (T::one() + e)
    }
}

/// ln(1 + e^s) without overflow.
fn softplus<T: Scalar>(s: T) -> T {
    if s > T::zero() {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Mean binary cross-entropy of probabilities against labels.
///
/// Probabilities must lie strictly inside (0, 1); nothing is clamped.
pub fn loss<T: Scalar>(probs: &[T], labels: &[u8]) -> T {
    assert_eq!(probs.len(), labels.len(), "probabilities and labels differ in length");
    let total: T = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| if y == 1 { p.ln() } else { (T::one() - p).ln() })
        .sum();
    -total / T::of_usize(probs.len())
}

/// Mean binary cross-entropy evaluated from logits, stable for any magnitude.
pub fn loss_from_logits<T: Scalar>(logits: &[T], labels: &[u8]) -> T {
    assert_eq!(logits.len(), labels.len());
    let total: T = logits
        .iter()
        .zip(labels)
        .map(|(&s, &y)| if y == 1 { softplus(-s) } else { softplus(s) })
        .sum();
    total / T::of_usize(logits.len())
}

impl ModelSpec {
    pub fn logistic(input_dim: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input_dim,
        }
    }

    pub fn mlp(input_dim: usize, hidden: usize) -> Self {
        Self {
            kind: ModelKind::Mlp { hidden },
            input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidParam("input_dim must be positive".into()));
        }
        if let ModelKind::Mlp { hidden: 0 } = self.kind {
            return Err(Error::InvalidParam("hidden_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<Block> {
        let d = self.input_dim;
        match self.kind {
            ModelKind::Logistic => vec![
                Block { name: "w", rows: 1, cols: d },
                Block { name: "b", rows: 1, cols: 1 },
            ],
            ModelKind::Mlp { hidden: h } => vec![
                Block { name: "W1", rows: h, cols: d },
                Block { name: "b1", rows: 1, cols: h },
                Block { name: "W2", rows: 1, cols: h },
                Block { name: "b2", rows: 1, cols: 1 },
            ],
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(Block::len).sum()
    }

    /// Deterministic initial parameters: zeros for logistic regression,
    /// Glorot-uniform weights and zero biases for the network.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamVector<T> {
        let mut params = ParamVector::zeros(self.layout());
        if let ModelKind::Mlp { hidden } = self.kind {
            let d = self.input_dim;
            let mut offset = 0;
            for block in params.layout.clone() {
                let n = block.len();
                let fans = match block.name {
                    "W1" => Some((d, hidden)),
                    "W2" => Some((hidden, 1)),
                    _ => None,
                };
                if let Some((fan_in, fan_out)) = fans {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut rng = rng::stream(seed, &["init", block.name]);
                    for v in &mut params.values[offset..offset + n] {
                        *v = T::of(rng.random_range(-bound..=bound));
                    }
                }
                offset += n;
            }
        }
        params
    }

    fn check(&self, params: &ParamVector<impl Scalar>, batch: &Batch) -> Result<()> {
        if params.layout != self.layout() {
            return Err(Error::Dimension(
                "parameter layout does not match the model".into(),
            ));
        }
        if batch.width() != self.input_dim {
            return Err(Error::Dimension(format!(
                "feature width {} but model expects {}",
                batch.width(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Pre-sigmoid outputs, one per row.
    pub fn logits<T: Scalar>(&self, params: &ParamVector<T>, batch: &Batch) -> Result<Vec<T>> {
        self.check(params, batch)?;
        let mut hidden_buf = Vec::new();
        Ok((0..batch.len())
            .map(|i| self.logit_row(params.values(), batch.row(i), &mut hidden_buf))
            .collect())
    }

    /// Predicted probabilities, one per row.
    pub fn forward<T: Scalar>(&self, params: &ParamVector<T>, batch: &Batch) -> Result<Vec<T>> {
        Ok(self.logits(params, batch)?.into_iter().map(sigmoid).collect())
    }

    /// Single-row logit. For the network, `hidden` is left holding the
    /// hidden-layer pre-activations.
    fn logit_row<T: Scalar>(&self, p: &[T], x: &[u8], hidden: &mut Vec<T>) -> T {
        let d = self.input_dim;
        match self.kind {
            ModelKind::Logistic => {
                let (w, b) = p.split_at(d);
                dot_binary(w, x) + b[0]
            }
            ModelKind::Mlp { hidden: h } => {
                let (w1, rest) = p.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);
                hidden.clear();
                hidden.extend((0..h).map(|k| dot_binary(&w1[k * d..(k + 1) * d], x) + b1[k]));
                let mut s = b2[0];
                for (&z, &v) in hidden.iter().zip(w2) {
                    if z > T::zero() {
                        s = s + v * z;
                    }
                }
                s
            }
        }
    }

    /// Add d(loss_i)/d(params) for one row into `out`.
    fn accumulate_row_grad<T: Scalar>(
        &self,
        p: &[T],
        x: &[u8],
        y: u8,
        hidden: &mut Vec<T>,
        out: &mut [T],
    ) {
        let d = self.input_dim;
        let s = self.logit_row(p, x, hidden);
        let err = sigmoid(s) - if y == 1 { T::one() } else { T::zero() };
        match self.kind {
            ModelKind::Logistic => {
                let (gw, gb) = out.split_at_mut(d);
                for (g, &xi) in gw.iter_mut().zip(x) {
                    if xi == 1 {
                        *g = *g + err;
                    }
                }
                gb[0] = gb[0] + err;
            }
            ModelKind::Mlp { hidden: h } => {
                let w2 = &p[h * d + h..h * d + 2 * h];
                let (gw1, rest) = out.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(h);
                gb2[0] = gb2[0] + err;
                for k in 0..h {
                    let z = hidden[k];
                    if z > T::zero() {
                        gw2[k] = gw2[k] + err * z;
                        let back = err * w2[k];
                        gb1[k] = gb1[k] + back;
                        for (g, &xi) in gw1[k * d..(k + 1) * d].iter_mut().zip(x) {
                            if xi == 1 {
                                *g = *g + back;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gradient of each row's own loss.
    pub fn per_example_grads<T: Scalar>(
        &self,
        params: &ParamVector<T>,
        batch: &Batch,
    ) -> Result<Vec<ParamVector<T>>> {
        self.check(params, batch)?;
        if batch.is_empty() {
            return Err(Error::Empty("batch has no rows".into()));
        }
        let mut hidden = Vec::new();
        Ok((0..batch.len())
            .map(|i| {
                let mut g = params.zeros_like();
                self.accumulate_row_grad(
                    params.values(),
                    batch.row(i),
                    batch.labels()[i],
                    &mut hidden,
                    &mut g.values,
                );
                g
            })
            .collect())
    }

    /// Gradient of the mean loss over the batch. Rows are accumulated in
    /// order, so this is the mean of `per_example_grads` up to the final
    /// division.
    pub fn grad<T: Scalar>(&self, params: &ParamVector<T>, batch: &Batch) -> Result<ParamVector<T>> {
        self.check(params, batch)?;
        if batch.is_empty() {
            return Err(Error::Empty("batch has no rows".into()));
        }
        let mut sum = params.zeros_like();
        let mut hidden = Vec::new();
        for i in 0..batch.len() {
            self.accumulate_row_grad(
                params.values(),
                batch.row(i),
                batch.labels()[i],
                &mut hidden,
                &mut sum.values,
            );
        }
        let n = T::of_usize(batch.len());
        for v in &mut sum.values {
            *v = *v / n;
        }
        Ok(sum)
    }

    /// Mean loss of the model on a batch.
    pub fn batch_loss<T: Scalar>(&self, params: &ParamVector<T>, batch: &Batch) -> Result<T> {
        if batch.is_empty() {
            return Err(Error::Empty("batch has no rows".into()));
        }
        Ok(loss_from_logits(&self.logits(params, batch)?, batch.labels()))
    }
}

fn dot_binary<T: Scalar>(w: &[T], x: &[u8]) -> T {
    w.iter()
        .zip(x)
        .filter(|(_, &xi)| xi == 1)
        .fold(T::zero(), |acc, (&wi, _)| acc + wi)
}
