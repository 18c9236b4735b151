//! Two-layer embedding encoder with unit-norm outputs and a unit-row class
//! weight matrix. Forward and backward passes are written out by hand.
//!
//! ```text
//! features ─▶ W1·x + b1 ─▶ max(0,·) ─▶ W2·h + b2 ─▶ x / ‖x‖ ─▶ x̂ · Wᵀ ─▶ logits
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{self, dot, l2_normalize, norm, Matrix};
use crate::scalar::Scalar;

/// Layer sizes of the encoder plus the number of classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_in: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_in: 20,
            hidden: 64,
            d_emb: 16,
            classes: 20,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 {
            return Err(Error::Config("d_in and hidden must be positive".into()));
        }
        if self.d_emb < 2 {
            return Err(Error::Config(format!(
                "d_emb = {} must be at least 2",
                self.d_emb
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    /// hidden × d_in
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    /// d_emb × hidden
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    /// When false the biases stay at zero and receive no gradient.
    pub bias: bool,
}

impl<T: Scalar> EncoderParams<T> {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init<R: Rng>(d_in: usize, hidden: usize, d_emb: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            w1: uniform_matrix(hidden, d_in, rng),
            b1: vec![T::zero(); hidden],
            w2: uniform_matrix(d_emb, hidden, rng),
            b2: vec![T::zero(); d_emb],
            bias,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_emb(&self) -> usize {
        self.w2.rows()
    }

    fn check(&self) -> Result<()> {
        if self.b1.len() != self.w1.rows()
            || self.w2.cols() != self.w1.rows()
            || self.b2.len() != self.w2.rows()
        {
            return Err(Error::Shape("inconsistent encoder parameter shapes".into()));
        }
        if self.d_emb() < 2 {
            return Err(Error::Config(
                "embedding dimension must be at least 2".into(),
            ));
        }
        let finite = self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(())
    }
}

fn uniform_matrix<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// C×d_emb matrix whose rows are kept at unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights<T>(Matrix<T>);

impl<T: Scalar> ClassWeights<T> {
    /// Rows drawn from an isotropic Gaussian and normalized.
    pub fn random<R: Rng>(classes: usize, d_emb: usize, rng: &mut R) -> Self {
        let data: Vec<T> = (0..classes * d_emb)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let m = Matrix::from_vec(classes, d_emb, data).expect("sized buffer");
        Self(renormalize_class_weights(&m).expect("gaussian rows are nonzero"))
    }

    /// Wraps `m` after checking that every row is unit-norm.
    pub fn from_matrix(m: Matrix<T>) -> Result<Self> {
        for (i, r) in m.row_iter().enumerate() {
            let n = norm(r);
            if !n.is_finite() || (n - T::one()).abs() > T::unit_tolerance() {
                return Err(Error::NonUnitRow {
                    row: i,
                    norm: n.as_f64(),
                });
            }
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.rows()
    }

    /// Applies `update` to the raw matrix, then projects the rows back onto
    /// the unit sphere.
    pub fn update(&mut self, update: impl FnOnce(&mut Matrix<T>)) -> Result<()> {
        let mut m = self.0.clone();
        update(&mut m);
        self.0 = renormalize_class_weights(&m)?;
        Ok(())
    }
}

/// Projects every row of `w` onto the unit sphere. Rows that are already
/// unit-norm to within a few ulps are returned untouched.
pub fn renormalize_class_weights<T: Scalar>(w: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = w.clone();
    let keep = T::epsilon() * T::lit(64.0);
    for i in 0..w.rows() {
        let n = norm(w.row(i));
        if (n - T::one()).abs() <= keep {
            continue;
        }
        let unit = l2_normalize(w.row(i)).map_err(|e| match e {
            Error::Degenerate(_) => Error::Degenerate(format!("class weight row {i} is zero")),
            other => other,
        })?;
        out.row_mut(i).copy_from_slice(&unit);
    }
    Ok(out)
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub input: Matrix<T>,
    /// First-layer pre-activations (N×hidden).
    pub pre_hidden: Matrix<T>,
    /// After `max(0,·)`.
    pub hidden: Matrix<T>,
    /// Second-layer output before normalization (N×d_emb).
    pub raw: Matrix<T>,
    pub raw_norms: Vec<T>,
    /// Unit-norm embeddings (N×d_emb).
    pub embeddings: Matrix<T>,
}

/// Maps N×d_in features to N unit-norm embeddings.
pub fn encoder_forward<T: Scalar>(
    params: &EncoderParams<T>,
    features: &Matrix<T>,
) -> Result<(Matrix<T>, ForwardTrace<T>)> {
    params.check()?;
    if features.cols() != params.d_in() {
        return Err(Error::Shape(format!(
            "features have {} columns, encoder expects {}",
            features.cols(),
            params.d_in()
        )));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("features".into()));
    }
    let n = features.rows();
    let pre_hidden = affine(features, &params.w1, &params.b1);
    let hidden = pre_hidden.map(|v| v.max(T::zero()));
    let raw = affine(&hidden, &params.w2, &params.b2);
    let mut raw_norms = Vec::with_capacity(n);
    let mut embeddings = Matrix::zeros(n, params.d_emb());
    for i in 0..n {
        let r = raw.row(i);
        let nr = norm(r);
        if !nr.is_finite() {
            return Err(Error::NonFinite(format!("embedding of sample {i}")));
        }
        if nr == T::zero() {
            return Err(Error::Degenerate(format!(
                "sample {i} maps to a zero embedding"
            )));
        }
        for (e, &v) in embeddings.row_mut(i).iter_mut().zip(r) {
            *e = v / nr;
        }
        raw_norms.push(nr);
    }
    let trace = ForwardTrace {
        input: features.clone(),
        pre_hidden,
        hidden,
        raw,
        raw_norms,
        embeddings: embeddings.clone(),
    };
    Ok((embeddings, trace))
}

/// `x·Wᵀ + b` for every row `x` of `input`.
fn affine<T: Scalar>(input: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Matrix<T> {
    let mut out = Matrix::zeros(input.rows(), w.rows());
    for i in 0..input.rows() {
        let x = input.row(i);
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = dot(w.row(k), x) + b[k];
        }
    }
    out
}

/// Encoder forward followed by cosine logits against the class weights.
pub fn model_forward<T: Scalar>(
    params: &EncoderParams<T>,
    classes: &ClassWeights<T>,
    features: &Matrix<T>,
) -> Result<(Matrix<T>, ForwardTrace<T>)> {
    let (emb, trace) = encoder_forward(params, features)?;
    let logits = numerics::cosine_logits(&emb, classes.matrix())?;
    Ok((logits, trace))
}

/// Logits for arbitrary (not necessarily unit-row) class weights. Used by
/// finite-difference checks that perturb individual weight entries.
pub(crate) fn logits_unchecked<T: Scalar>(
    params: &EncoderParams<T>,
    classes: &Matrix<T>,
    features: &Matrix<T>,
) -> Result<Matrix<T>> {
    let (emb, _) = encoder_forward(params, features)?;
    Ok(numerics::dot_logits(&emb, classes, false))
}

/// Gradients of the encoder parameters, shaped like [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Backpropagates `dlogits` (N×C) through the cosine logits, the
/// normalization and both layers. Returns encoder gradients and the
/// gradient with respect to the (unconstrained) class weight matrix.
pub fn model_backward<T: Scalar>(
    params: &EncoderParams<T>,
    trace: &ForwardTrace<T>,
    classes: &ClassWeights<T>,
    dlogits: &Matrix<T>,
) -> Result<(EncoderGrads<T>, Matrix<T>)> {
    let w = classes.matrix();
    let n = trace.embeddings.rows();
    let d_emb = params.d_emb();
    let hidden = params.hidden();
    if dlogits.shape() != (n, w.rows())
        || trace.embeddings.cols() != d_emb
        || w.cols() != d_emb
        || trace.hidden.cols() != hidden
        || trace.input.cols() != params.d_in()
        || trace.raw_norms.len() != n
    {
        return Err(Error::Shape(
            "trace, parameters and upstream gradient disagree".into(),
        ));
    }

    // logits = x̂ Wᵀ
    let mut d_w = Matrix::zeros(w.rows(), d_emb);
    let mut d_emb_rows = Matrix::zeros(n, d_emb);
    for i in 0..n {
        let xi = trace.embeddings.row(i);
        for j in 0..w.rows() {
            let g = dlogits[(i, j)];
            if g == T::zero() {
                continue;
            }
            for (acc, &x) in d_w.row_mut(j).iter_mut().zip(xi) {
                *acc += g * x;
            }
            for (acc, &wj) in d_emb_rows.row_mut(i).iter_mut().zip(w.row(j)) {
                *acc += g * wj;
            }
        }
    }

    // x̂ = x / ‖x‖  ⇒  dx = (I − x̂x̂ᵀ) dx̂ / ‖x‖
    let mut d_raw = Matrix::zeros(n, d_emb);
    for i in 0..n {
        let xi = trace.embeddings.row(i);
        let g = d_emb_rows.row(i);
        let radial = dot(xi, g);
        let inv = T::one() / trace.raw_norms[i];
        for ((o, &gk), &xk) in d_raw.row_mut(i).iter_mut().zip(g).zip(xi) {
            *o = (gk - xk * radial) * inv;
        }
    }

    let (w2, b2, d_hidden) = affine_backward(&trace.hidden, &params.w2, &d_raw, params.bias);
    let mut d_pre = d_hidden;
    for (g, &p) in d_pre
        .as_mut_slice()
        .iter_mut()
        .zip(trace.pre_hidden.as_slice())
    {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
    let (w1, b1, _) = affine_backward(&trace.input, &params.w1, &d_pre, params.bias);

    Ok((EncoderGrads { w1, b1, w2, b2 }, d_w))
}

/// For `out = input·Wᵀ + b`: returns (dW, db, d_input).
fn affine_backward<T: Scalar>(
    input: &Matrix<T>,
    w: &Matrix<T>,
    d_out: &Matrix<T>,
    bias: bool,
) -> (Matrix<T>, Vec<T>, Matrix<T>) {
    let mut d_w = Matrix::zeros(w.rows(), w.cols());
    let mut d_b = vec![T::zero(); w.rows()];
    let mut d_in = Matrix::zeros(input.rows(), input.cols());
    for i in 0..input.rows() {
        let x = input.row(i);
        for k in 0..w.rows() {
            let g = d_out[(i, k)];
            if g == T::zero() {
                continue;
            }
            if bias {
                d_b[k] += g;
            }
            for (acc, &xv) in d_w.row_mut(k).iter_mut().zip(x) {
                *acc += g * xv;
            }
            for (acc, &wv) in d_in.row_mut(i).iter_mut().zip(w.row(k)) {
                *acc += g * wv;
            }
        }
    }
    (d_w, d_b, d_in)
}

/// Encoder plus class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub encoder: EncoderParams<T>,
    pub classes: ClassWeights<T>,
}

/// Gradient of every [`Model`] parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub encoder: EncoderGrads<T>,
    pub classes: Matrix<T>,
}

impl<T: Scalar> ModelGrads<T> {
    /// Flat views in checkpoint order: w1, b1, w2, b2, class weights.
    pub fn slices(&self) -> [&[T]; 5] {
        [
            self.encoder.w1.as_slice(),
            &self.encoder.b1,
            self.encoder.w2.as_slice(),
            &self.encoder.b2,
            self.classes.as_slice(),
        ]
    }
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(dims: ModelDims, bias: bool, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(dims.d_in, dims.hidden, dims.d_emb, bias, &mut rng);
        let classes = ClassWeights::random(dims.classes, dims.d_emb, &mut rng);
        Ok(Self { encoder, classes })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.encoder.d_in(),
            hidden: self.encoder.hidden(),
            d_emb: self.encoder.d_emb(),
            classes: self.classes.classes(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Flat views in checkpoint order: w1, b1, w2, b2, class weights.
    pub fn param_slices(&self) -> [&[T]; 5] {
        [
            self.encoder.w1.as_slice(),
            &self.encoder.b1,
            self.encoder.w2.as_slice(),
            &self.encoder.b2,
            self.classes.0.as_slice(),
        ]
    }

    /// Mutable flat views of the encoder parameters (class weights are
    /// excluded: they must go through [`ClassWeights::update`]).
    pub fn encoder_slices_mut(&mut self) -> [&mut [T]; 4] {
        let e = &mut self.encoder;
        [
            e.w1.as_mut_slice(),
            e.b1.as_mut_slice(),
            e.w2.as_mut_slice(),
            e.b2.as_mut_slice(),
        ]
    }

    pub fn forward(&self, features: &Matrix<T>) -> Result<(Matrix<T>, ForwardTrace<T>)> {
        model_forward(&self.encoder, &self.classes, features)
    }

    pub fn embed(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        encoder_forward(&self.encoder, features).map(|(e, _)| e)
    }

    pub fn backward(&self, trace: &ForwardTrace<T>, dlogits: &Matrix<T>) -> Result<ModelGrads<T>> {
        let (encoder, classes) = model_backward(&self.encoder, trace, &self.classes, dlogits)?;
        Ok(ModelGrads { encoder, classes })
    }
}

/// Metadata stored in a checkpoint header next to the dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
}

const CHECKPOINT_MAGIC: &str = "marginlab-checkpoint 1";

/// Writes a checkpoint.
///
/// Layout: the magic line, then `key value` header lines (`d_in`, `hidden`,
/// `d_emb`, `classes`, `bias`, `seed`, `step`), then a `values` line, then
/// all parameters as 17-significant-digit decimals in the order w1
/// (row-major), b1, w2 (row-major), b2, class weights (row-major), one
/// matrix row per line.
pub fn write_checkpoint<T: Scalar, W: Write>(
    out: &mut W,
    model: &Model<T>,
    meta: CheckpointMeta,
) -> Result<()> {
    let d = model.dims();
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "d_in {}", d.d_in)?;
    writeln!(out, "hidden {}", d.hidden)?;
    writeln!(out, "d_emb {}", d.d_emb)?;
    writeln!(out, "classes {}", d.classes)?;
    writeln!(out, "bias {}", u8::from(model.encoder.bias))?;
    writeln!(out, "seed {}", meta.seed)?;
    writeln!(out, "step {}", meta.step)?;
    writeln!(out, "values")?;
    let e = &model.encoder;
    write_rows(out, e.w1.as_slice(), e.w1.cols())?;
    write_rows(out, &e.b1, e.b1.len())?;
    write_rows(out, e.w2.as_slice(), e.w2.cols())?;
    write_rows(out, &e.b2, e.b2.len())?;
    write_rows(out, model.classes.0.as_slice(), d.d_emb)?;
    Ok(())
}

fn write_rows<T: Scalar, W: Write>(out: &mut W, values: &[T], width: usize) -> Result<()> {
    for row in values.chunks(width.max(1)) {
        let mut first = true;
        for v in row {
            if !first {
                out.write_all(b" ")?;
            }
            write!(out, "{v:.16e}")?;
            first = false;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: BufRead>(input: R) -> Result<(Model<T>, CheckpointMeta)> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(Error::Parse {
                line: 0,
                msg: format!("unexpected end of checkpoint, expected {what}"),
            }),
        }
    };
    let (ln, magic) = next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            line: ln,
            msg: "not a marginlab checkpoint".into(),
        });
    }
    let mut header = |key: &str| -> Result<u64> {
        let (ln, l) = next(key)?;
        let mut it = l.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(k), Some(v), None) if k == key => v.parse().map_err(|_| Error::Parse {
                line: ln,
                msg: format!("invalid value for `{key}`"),
            }),
            _ => Err(Error::Parse {
                line: ln,
                msg: format!("expected `{key} <integer>`"),
            }),
        }
    };
    let to_usize =
        |v: u64| usize::try_from(v).map_err(|_| Error::Config("dimension too large".into()));
    let dims = ModelDims {
        d_in: to_usize(header("d_in")?)?,
        hidden: to_usize(header("hidden")?)?,
        d_emb: to_usize(header("d_emb")?)?,
        classes: to_usize(header("classes")?)?,
    };
    let bias = match header("bias")? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Config(format!(
                "bias flag must be 0 or 1, got {other}"
            )))
        }
    };
    let meta = CheckpointMeta {
        seed: header("seed")?,
        step: header("step")?,
    };
    dims.validate()?;
    let (ln, l) = next("values")?;
    if l.trim() != "values" {
        return Err(Error::Parse {
            line: ln,
            msg: "expected `values`".into(),
        });
    }
    let mut values = Vec::new();
    for (i, l) in lines {
        let l = l?;
        for tok in l.split_whitespace() {
            let v: T = tok.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("invalid number `{tok}`"),
            })?;
            values.push(v);
        }
    }
    let ModelDims {
        d_in,
        hidden,
        d_emb,
        classes,
    } = dims;
    let sizes = [
        hidden * d_in,
        hidden,
        d_emb * hidden,
        d_emb,
        classes * d_emb,
    ];
    let expected: usize = sizes.iter().sum();
    if values.len() != expected {
        return Err(Error::Config(format!(
            "checkpoint holds {} values, dimensions require {expected}",
            values.len()
        )));
    }
    let mut rest = values.as_slice();
    let mut take = |k: usize| {
        let (head, tail) = rest.split_at(k);
        rest = tail;
        head.to_vec()
    };
    let encoder = EncoderParams {
        w1: Matrix::from_vec(hidden, d_in, take(sizes[0]))?,
        b1: take(sizes[1]),
        w2: Matrix::from_vec(d_emb, hidden, take(sizes[2]))?,
        b2: take(sizes[3]),
        bias,
    };
    encoder.check()?;
    let classes = ClassWeights::from_matrix(Matrix::from_vec(classes, d_emb, take(sizes[4]))?)?;
    Ok((Model { encoder, classes }, meta))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    meta: CheckpointMeta,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, model, meta)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
