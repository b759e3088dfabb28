//! Per-domain mapping functions onto the shared hypersphere, trained with a
//! scaled-softmax cosine objective against fixed category prototypes.
//!
//! The gradients are derived by hand and flow through the softmax, the cosine
//! distance and the final output normalization; prototypes receive none.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hypersphere::{UnitVector, NORM_EPS};
use crate::prototype::{fmt_float, parse_floats, PrototypeBook};

const MAP_MAGIC: &str = "OXDS-MAP";

/// One affine layer; also reused as the gradient container of that layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> LayerParams {
        LayerParams {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }
}

/// Learned map from one domain's raw feature space to the unit sphere:
/// input standardization, one affine layer (optionally two with a tanh in
/// between), then L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainMapper {
    domain: String,
    layers: Vec<LayerParams>,
    input_mean: DVector<f64>,
    input_scale: DVector<f64>,
}

impl DomainMapper {
    /// Builds a mapper from explicit parameters.
    ///
    /// `layers` must hold one (affine) or two (single hidden layer) entries
    /// with matching inner dimensions; `input_scale` must be strictly
    /// positive componentwise.
    pub fn from_parts(
        domain: impl Into<String>,
        layers: Vec<LayerParams>,
        input_mean: DVector<f64>,
        input_scale: DVector<f64>,
    ) -> Result<Self> {
        let domain = domain.into();
        if domain.is_empty() || domain.chars().any(char::is_whitespace) {
            return Err(Error::InvalidParameter(format!(
                "domain name `{domain}` is empty or contains whitespace"
            )));
        }
        if layers.is_empty() || layers.len() > 2 {
            return Err(Error::InvalidParameter(
                "mapper needs one or two layers".into(),
            ));
        }
        let d_in = layers[0].weight.ncols();
        if input_mean.len() != d_in || input_scale.len() != d_in {
            return Err(Error::DimensionMismatch {
                expected: d_in,
                actual: input_mean.len().min(input_scale.len()),
            });
        }
        if input_scale.iter().any(|&s| s <= 0.0 || s.is_nan()) {
            return Err(Error::InvalidParameter(
                "input_scale must be strictly positive".into(),
            ));
        }
        let mut prev = d_in;
        for layer in &layers {
            if layer.weight.ncols() != prev {
                return Err(Error::DimensionMismatch {
                    expected: prev,
                    actual: layer.weight.ncols(),
                });
            }
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: layer.weight.nrows(),
                    actual: layer.bias.len(),
                });
            }
            prev = layer.weight.nrows();
        }
        if prev < 2 {
            return Err(Error::InvalidParameter(
                "output dimension must be at least 2".into(),
            ));
        }
        Ok(DomainMapper {
            domain,
            layers,
            input_mean,
            input_scale,
        })
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn input_mean(&self) -> &DVector<f64> {
        &self.input_mean
    }

    pub fn input_scale(&self) -> &DVector<f64> {
        &self.input_scale
    }

    fn standardize(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.input_mean.iter())
                .zip(self.input_scale.iter())
                .map(|((x, m), s)| (x - m) / s),
        )
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "feature vector has non-finite components".into(),
            ));
        }
        Ok(())
    }

    /// Maps a raw feature vector onto the unit sphere.
    pub fn forward(&self, x: &[f64]) -> Result<UnitVector> {
        Ok(self.forward_trace(x)?.output)
    }

    fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut activations = vec![self.standardize(x)];
        let mut pre_norm = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = &layer.weight * activations.last().unwrap() + &layer.bias;
            if i + 1 < self.layers.len() {
                activations.push(z.map(f64::tanh));
            } else {
                pre_norm = Some(z);
            }
        }
        let pre_norm = pre_norm.unwrap();
        let norm = pre_norm.norm();
        if norm <= NORM_EPS || norm.is_nan() {
            return Err(Error::ZeroVector {
                norm,
                eps: NORM_EPS,
            });
        }
        let output = UnitVector::new((&pre_norm / norm).iter().copied().collect())?;
        Ok(ForwardTrace {
            activations,
            norm,
            output,
        })
    }
}

struct ForwardTrace {
    /// Layer inputs: standardized features, then each tanh output.
    activations: Vec<DVector<f64>>,
    norm: f64,
    output: UnitVector,
}

/// A mini-batch of raw features with their category labels.
#[derive(Debug)]
pub struct LabeledBatch<'a> {
    features: Vec<&'a [f64]>,
    categories: Vec<&'a str>,
}

impl<'a> LabeledBatch<'a> {
    pub fn new(features: Vec<&'a [f64]>, categories: Vec<&'a str>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyInput);
        }
        if features.len() != categories.len() {
            return Err(Error::InvalidParameter(format!(
                "{} feature rows but {} labels",
                features.len(),
                categories.len()
            )));
        }
        if features
            .iter()
            .any(|row| row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidParameter(
                "batch contains non-finite features".into(),
            ));
        }
        Ok(LabeledBatch {
            features,
            categories,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Optimizer and objective settings; defaults follow the reference recipe
/// (scale 20, lr 1e-4 with cosine annealing, Nesterov 0.9, batch 128).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub scale_s: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Width of an optional single hidden layer; `None` keeps the affine map.
    pub hidden_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scale_s: 20.0,
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 128,
            epochs: 30,
            seed: 0,
            hidden_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_s <= 0.0 || self.scale_s.is_nan() {
            return Err(Error::InvalidParameter("scale_s must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(Error::InvalidParameter(
                "learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(
                "momentum must lie in [0, 1)".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if let Some(h) = self.hidden_dim {
            if h == 0 {
                return Err(Error::InvalidParameter("hidden_dim must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Gradient of the batch loss with respect to every layer parameter.
#[derive(Debug, Clone)]
pub struct MapperGradient {
    pub layers: Vec<LayerParams>,
}

fn prototype_matrix(book: &PrototypeBook) -> DMatrix<f64> {
    DMatrix::from_row_iterator(
        book.len(),
        book.dim(),
        book.vectors()
            .iter()
            .flat_map(|v| v.as_slice().iter().copied()),
    )
}

/// Numerically stable softmax (max-subtracted, renormalized).
pub(crate) fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Scaled negative cosine distances `-s * (1 - <f, phi_j>)` for every
/// category; these are the softmax logits of the posterior.
fn scaled_logits(f: &UnitVector, protos: &DMatrix<f64>, s: f64) -> Vec<f64> {
    let fv = DVector::from_column_slice(f.as_slice());
    let dots = protos * fv;
    dots.iter().map(|d| -s * (1.0 - d)).collect()
}

fn check_posterior_inputs(m: &DomainMapper, book: &PrototypeBook, s: f64) -> Result<()> {
    if book.dim() != m.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: m.output_dim(),
            actual: book.dim(),
        });
    }
    if s <= 0.0 || s.is_nan() {
        return Err(Error::InvalidParameter("scale must be positive".into()));
    }
    Ok(())
}

/// Posterior over the book's categories for one raw feature vector.
pub fn posterior(m: &DomainMapper, x: &[f64], book: &PrototypeBook, s: f64) -> Result<Vec<f64>> {
    check_posterior_inputs(m, book, s)?;
    let f = m.forward(x)?;
    let protos = prototype_matrix(book);
    Ok(stable_softmax(&scaled_logits(&f, &protos, s)))
}

/// Posterior over the book's categories for an already embedded query.
pub fn posterior_from_embedding(f: &UnitVector, book: &PrototypeBook, s: f64) -> Result<Vec<f64>> {
    if book.dim() != f.dim() {
        return Err(Error::DimensionMismatch {
            expected: f.dim(),
            actual: book.dim(),
        });
    }
    if s <= 0.0 || s.is_nan() {
        return Err(Error::InvalidParameter("scale must be positive".into()));
    }
    let protos = prototype_matrix(book);
    Ok(stable_softmax(&scaled_logits(f, &protos, s)))
}

fn label_indices(batch: &LabeledBatch, book: &PrototypeBook) -> Result<Vec<usize>> {
    batch
        .categories
        .iter()
        .map(|c| {
            book.position(c)
                .ok_or_else(|| Error::UnknownCategory(c.to_string()))
        })
        .collect()
}

/// Mean cross-entropy of the batch under the scaled-softmax posterior.
pub fn batch_loss(
    m: &DomainMapper,
    batch: &LabeledBatch,
    book: &PrototypeBook,
    s: f64,
) -> Result<f64> {
    check_posterior_inputs(m, book, s)?;
    let labels = label_indices(batch, book)?;
    let protos = prototype_matrix(book);
    let mut total = 0.0;
    for (x, &label) in batch.features.iter().zip(&labels) {
        let f = m.forward(x)?;
        let logits = scaled_logits(&f, &protos, s);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[label];
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradient of [`batch_loss`] with respect to weights and biases.
/// Prototypes are fixed and receive no gradient.
pub fn batch_gradient(
    m: &DomainMapper,
    batch: &LabeledBatch,
    book: &PrototypeBook,
    s: f64,
) -> Result<MapperGradient> {
    check_posterior_inputs(m, book, s)?;
    let labels = label_indices(batch, book)?;
    let protos = prototype_matrix(book);
    let mut grads: Vec<LayerParams> = m.layers.iter().map(LayerParams::zeros_like).collect();

    for (x, &label) in batch.features.iter().zip(&labels) {
        let trace = m.forward_trace(x)?;
        let f = &trace.output;
        let probs = stable_softmax(&scaled_logits(f, &protos, s));

        // d(loss)/d(logit_j) = p_j - 1[j = label]; logit_j = s * <f, phi_j> - s.
        let mut dlogits = DVector::from_vec(probs);
        dlogits[label] -= 1.0;
        let grad_f = protos.tr_mul(&dlogits) * s;

        // Through f = z / |z|: grad_z = (grad_f - <f, grad_f> f) / |z|.
        let fv = DVector::from_column_slice(f.as_slice());
        let radial = fv.dot(&grad_f);
        let mut grad = (grad_f - fv * radial) / trace.norm;

        for i in (0..m.layers.len()).rev() {
            let input = &trace.activations[i];
            grads[i].bias += &grad;
            grads[i].weight.ger(1.0, &grad, input, 1.0);
            if i > 0 {
                let back = m.layers[i].weight.tr_mul(&grad);
                // input = tanh(z_{i-1}), so dtanh = 1 - input^2.
                grad = back.zip_map(input, |g, a| g * (1.0 - a * a));
            }
        }
    }

    let inv = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.weight *= inv;
        g.bias *= inv;
    }
    Ok(MapperGradient { layers: grads })
}

/// A trained mapper plus the full-training-set loss trace: entry 0 is the
/// loss at initialization, entry `e` the loss after epoch `e`.
#[derive(Debug)]
pub struct TrainOutcome {
    pub mapper: DomainMapper,
    pub epoch_losses: Vec<f64>,
}

fn glorot_layer(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> LayerParams {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut weight = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            weight[(r, c)] = rng.random_range(-a..a);
        }
    }
    LayerParams {
        weight,
        bias: DVector::zeros(rows),
    }
}

/// Trains a mapper for one domain on its labeled features.
///
/// Standardization statistics are fitted once on the training features.
/// Optimization is Nesterov momentum over seeded shuffled mini-batches with a
/// per-step cosine-annealed learning rate; everything is deterministic given
/// `cfg.seed`.
pub fn train(
    domain: &str,
    features: &[Vec<f64>],
    categories: &[String],
    book: &PrototypeBook,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if features.len() != categories.len() {
        return Err(Error::InvalidParameter(format!(
            "{} feature rows but {} labels",
            features.len(),
            categories.len()
        )));
    }
    for c in categories {
        if !book.contains(c) {
            return Err(Error::UnknownCategory(c.clone()));
        }
    }
    let d_in = features[0].len();
    for row in features {
        if row.len() != d_in {
            return Err(Error::DimensionMismatch {
                expected: d_in,
                actual: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "training features contain non-finite values".into(),
            ));
        }
    }
    let d_out = book.dim();
    let n = features.len();

    // Standardization: per-feature mean and population standard deviation.
    // Constant features keep scale 1 so they stay at zero after centering.
    let mut mean = vec![0.0; d_in];
    for row in features {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d_in];
    for row in features {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / n as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = match cfg.hidden_dim {
        None => vec![glorot_layer(&mut rng, d_out, d_in)],
        Some(h) => vec![
            glorot_layer(&mut rng, h, d_in),
            glorot_layer(&mut rng, d_out, h),
        ],
    };
    let mut mapper = DomainMapper::from_parts(
        domain,
        layers,
        DVector::from_vec(mean),
        DVector::from_vec(scale),
    )?;

    let full_loss = |m: &DomainMapper| -> Result<f64> {
        let batch = LabeledBatch::new(
            features.iter().map(Vec::as_slice).collect(),
            categories.iter().map(String::as_str).collect(),
        )?;
        batch_loss(m, &batch, book, cfg.scale_s)
    };

    let mut epoch_losses = vec![full_loss(&mapper)?];
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            mapper,
            epoch_losses,
        });
    }

    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as f64;
    let mut momentum: Vec<LayerParams> =
        mapper.layers.iter().map(LayerParams::zeros_like).collect();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    for _ in 0..cfg.epochs {
        shuffle(&mut indices, &mut rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = LabeledBatch::new(
                chunk.iter().map(|&i| features[i].as_slice()).collect(),
                chunk.iter().map(|&i| categories[i].as_str()).collect(),
            )?;
            let grad = batch_gradient(&mapper, &batch, book, cfg.scale_s)?;
            let lr = cfg.learning_rate
                * 0.5
                * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            for ((layer, buf), g) in mapper
                .layers
                .iter_mut()
                .zip(&mut momentum)
                .zip(&grad.layers)
            {
                nesterov_step(
                    &mut layer.weight,
                    &mut buf.weight,
                    &g.weight,
                    cfg.momentum,
                    lr,
                );
                nesterov_step_vec(&mut layer.bias, &mut buf.bias, &g.bias, cfg.momentum, lr);
            }
            step += 1;
        }
        epoch_losses.push(full_loss(&mapper)?);
    }

    Ok(TrainOutcome {
        mapper,
        epoch_losses,
    })
}

/// Nesterov momentum update: `buf = mu*buf + g; p -= lr * (g + mu*buf)`.
fn nesterov_step(
    param: &mut DMatrix<f64>,
    buf: &mut DMatrix<f64>,
    grad: &DMatrix<f64>,
    mu: f64,
    lr: f64,
) {
    for ((p, b), g) in param
        .as_mut_slice()
        .iter_mut()
        .zip(buf.as_mut_slice())
        .zip(grad.as_slice())
    {
        *b = mu * *b + g;
        *p -= lr * (g + mu * *b);
    }
}

fn nesterov_step_vec(
    param: &mut DVector<f64>,
    buf: &mut DVector<f64>,
    grad: &DVector<f64>,
    mu: f64,
    lr: f64,
) {
    for ((p, b), g) in param
        .as_mut_slice()
        .iter_mut()
        .zip(buf.as_mut_slice())
        .zip(grad.as_slice())
    {
        *b = mu * *b + g;
        *p -= lr * (g + mu * *b);
    }
}

/// Seeded Fisher-Yates shuffle.
fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Writes a model file; floats carry 17 significant digits so the round trip
/// is exact for double precision.
pub fn save_mapper(m: &DomainMapper, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let d_in = m.input_dim();
    let d_out = m.output_dim();
    match m.layers.len() {
        1 => writeln!(out, "{MAP_MAGIC} 1 {} {d_in} {d_out}", m.domain)?,
        2 => writeln!(
            out,
            "{MAP_MAGIC} 1 {} {d_in} {d_out} hidden {}",
            m.domain,
            m.layers[0].weight.nrows()
        )?,
        _ => unreachable!("validated in from_parts"),
    }
    let write_row = |out: &mut BufWriter<fs::File>, row: &[f64]| -> Result<()> {
        let mut first = true;
        for x in row {
            if !first {
                write!(out, " ")?;
            }
            write!(out, "{}", fmt_float(*x))?;
            first = false;
        }
        writeln!(out)?;
        Ok(())
    };
    for layer in &m.layers {
        for r in 0..layer.weight.nrows() {
            let row: Vec<f64> = layer.weight.row(r).iter().copied().collect();
            write_row(&mut out, &row)?;
        }
        write_row(&mut out, layer.bias.as_slice())?;
    }
    write_row(&mut out, m.input_mean.as_slice())?;
    write_row(&mut out, m.input_scale.as_slice())?;
    out.flush()?;
    Ok(())
}

/// Reads a model file written by [`save_mapper`].
pub fn load_mapper(path: &Path) -> Result<DomainMapper> {
    let text = fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let ok_header = (fields.len() == 5 || fields.len() == 7)
        && fields[0] == MAP_MAGIC
        && fields[1] == "1"
        && (fields.len() == 5 || fields[5] == "hidden");
    if !ok_header {
        return Err(parse_err(
            1,
            format!("expected `{MAP_MAGIC} 1 <domain> <D_in> <D_out> [hidden <H>]` header"),
        ));
    }
    let domain = fields[2].to_string();
    let d_in: usize = fields[3]
        .parse()
        .map_err(|_| parse_err(1, format!("bad input dimension `{}`", fields[3])))?;
    let d_out: usize = fields[4]
        .parse()
        .map_err(|_| parse_err(1, format!("bad output dimension `{}`", fields[4])))?;
    let hidden: Option<usize> = if fields.len() == 7 {
        Some(
            fields[6]
                .parse()
                .map_err(|_| parse_err(1, format!("bad hidden width `{}`", fields[6])))?,
        )
    } else {
        None
    };

    let mut next_row = |expected: usize| -> Result<Vec<f64>> {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| parse_err(0, "unexpected end of file".into()))?;
        parse_floats(line.split_whitespace(), expected, path, idx + 1)
    };
    let mut read_layer = |rows: usize, cols: usize| -> Result<LayerParams> {
        let mut weight = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            let row = next_row(cols)?;
            for (c, v) in row.into_iter().enumerate() {
                weight[(r, c)] = v;
            }
        }
        let bias = DVector::from_vec(next_row(rows)?);
        Ok(LayerParams { weight, bias })
    };

    let layers = match hidden {
        None => vec![read_layer(d_out, d_in)?],
        Some(h) => vec![read_layer(h, d_in)?, read_layer(d_out, h)?],
    };
    let input_mean = DVector::from_vec(next_row(d_in)?);
    let input_scale = DVector::from_vec(next_row(d_in)?);
    if lines.next().is_some() {
        return Err(parse_err(0, "trailing content after model body".into()));
    }
    DomainMapper::from_parts(domain, layers, input_mean, input_scale)
}
