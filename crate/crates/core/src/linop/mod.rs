//! Degradation operators `A`, their pseudo-inverses `A†`, and range/null projections.
//!
//! Structured operators (identity, zero, grayscale, average pooling, masks, Walsh rows)
//! carry hand-built pseudo-inverses. Blur and user matrices are stored densely and get
//! an SVD-derived pseudo-inverse. Composites chain both directions.

mod blur;
pub mod matrix;
pub mod spec;
pub mod svd;
pub mod walsh;

use std::path::Path;
use std::sync::{Arc, OnceLock};

pub use blur::{circulant_matrix, kernel as blur_kernel, BlurKind};
pub use matrix::Matrix;
pub use spec::{OperatorSpec, SpecNode, MAX_COMPOSE_DEPTH};
pub use svd::{check_dense_size, pinv_from_svd, svd, SvdFactors, DEFAULT_ZERO_THRESHOLD, MAX_DENSE_ENTRIES};
pub use walsh::{fwht_normalized, WalshRows};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::{gaussian_sample, RngStream};
use crate::tensor::{checked_numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PinvKind {
    HandConstructed,
    SvdDerived,
}

#[derive(Clone, Debug)]
enum Kind {
    Identity,
    Zero,
    Grayscale {
        plane: usize,
    },
    AvgPool {
        n: usize,
    },
    Mask {
        keep: Arc<Vec<bool>>,
    },
    Walsh(WalshRows),
    Dense {
        a: Arc<Matrix>,
        pinv: Arc<Matrix>,
        blocks: usize,
        block_svd: Option<Arc<SvdFactors>>,
    },
    Compose(Vec<LinearOperator>),
    RangeProjector(Box<LinearOperator>),
}

/// Rectangle of pixels `[row, row + height) x [col, col + width)` in an image plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct LinearOperator {
    kind: Kind,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    pinv_kind: PinvKind,
    svd: OnceLock<Arc<SvdFactors>>,
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::Incompatible(msg.into())
}

fn image_shape(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidParameter(format!(
            "{what} needs an image-shaped input [C,H,W], got {shape:?}"
        ))),
    }
}

impl LinearOperator {
    fn new(kind: Kind, in_shape: Vec<usize>, out_shape: Vec<usize>, pinv_kind: PinvKind) -> Self {
        Self {
            kind,
            in_shape,
            out_shape,
            pinv_kind,
            svd: OnceLock::new(),
        }
    }

    pub fn identity(shape: &[usize]) -> Result<Self> {
        checked_numel(shape)?;
        Ok(Self::new(
            Kind::Identity,
            shape.to_vec(),
            shape.to_vec(),
            PinvKind::HandConstructed,
        ))
    }

    /// Maps every input to the zero vector of length `d`.
    pub fn zero(in_shape: &[usize], d: usize) -> Result<Self> {
        checked_numel(in_shape)?;
        checked_numel(&[d])?;
        Ok(Self::new(
            Kind::Zero,
            in_shape.to_vec(),
            vec![d],
            PinvKind::HandConstructed,
        ))
    }

    /// Channel mean of an RGB input `[3,H,W]` (or a single pixel `[3]`).
    pub fn grayscale(in_shape: &[usize]) -> Result<Self> {
        let (plane, out_shape) = match *in_shape {
            [3] => (1, vec![1]),
            [3, h, w] => (h * w, vec![1, h, w]),
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "grayscale needs a 3-channel input, got {in_shape:?}"
                )))
            }
        };
        checked_numel(in_shape)?;
        Ok(Self::new(
            Kind::Grayscale { plane },
            in_shape.to_vec(),
            out_shape,
            PinvKind::HandConstructed,
        ))
    }

    /// Mean over non-overlapping `n x n` patches of every channel.
    pub fn avgpool(in_shape: &[usize], n: usize) -> Result<Self> {
        let (c, h, w) = image_shape(in_shape, "avgpool")?;
        if n == 0 || h % n != 0 || w % n != 0 {
            return Err(Error::InvalidParameter(format!(
                "avgpool:{n} does not divide image size {h}x{w}"
            )));
        }
        checked_numel(in_shape)?;
        Ok(Self::new(
            Kind::AvgPool { n },
            in_shape.to_vec(),
            vec![c, h / n, w / n],
            PinvKind::HandConstructed,
        ))
    }

    /// Keeps pixels where `keep` is true in every channel, zeroes the rest. `keep` covers
    /// one image plane (or the whole vector for flat inputs).
    pub fn mask(in_shape: &[usize], keep: Vec<bool>) -> Result<Self> {
        let total = checked_numel(in_shape)?;
        let plane = match *in_shape {
            [_, h, w] => h * w,
            _ => total,
        };
        if keep.len() != plane {
            return Err(Error::DimensionMismatch {
                expected: plane,
                actual: keep.len(),
                context: "mask size vs input plane",
            });
        }
        Ok(Self::new(
            Kind::Mask { keep: Arc::new(keep) },
            in_shape.to_vec(),
            in_shape.to_vec(),
            PinvKind::HandConstructed,
        ))
    }

    /// Mask from a PGM file; pixels at or above half intensity are kept.
    pub fn mask_from_pgm(path: impl AsRef<Path>, in_shape: &[usize]) -> Result<Self> {
        let img = io::read_image(path.as_ref())?;
        let (c, h, w) = img.image_dims().expect("netpbm decodes to [C,H,W]");
        if c != 1 {
            return Err(Error::InvalidParameter(format!(
                "mask {} must be a PGM, found {c} channels",
                path.as_ref().display()
            )));
        }
        let plane_ok = match *in_shape {
            [_, ih, iw] => (ih, iw) == (h, w),
            _ => checked_numel(in_shape)? == h * w,
        };
        if !plane_ok {
            return Err(Error::InvalidParameter(format!(
                "mask is {h}x{w} but the operand has shape {in_shape:?}"
            )));
        }
        let keep = img.as_slice().iter().map(|&v| v >= 0.5).collect();
        Self::mask(in_shape, keep)
    }

    /// `ceil(ratio * D)` seeded rows of the normalized Walsh–Hadamard matrix.
    pub fn walsh(in_shape: &[usize], ratio: f64, seed: u64) -> Result<Self> {
        let d = checked_numel(in_shape)?;
        let rows = WalshRows::new(d, ratio, seed)?;
        let m = rows.rows().len();
        Ok(Self::new(
            Kind::Walsh(rows),
            in_shape.to_vec(),
            vec![m],
            PinvKind::HandConstructed,
        ))
    }

    /// Circular blur applied to each channel independently.
    pub fn blur(in_shape: &[usize], kind: BlurKind, size: usize) -> Result<Self> {
        let (c, h, w) = image_shape(in_shape, "blur")?;
        check_dense_size(h * w, h * w)?;
        let k = blur::kernel(kind, size)?;
        let a = circulant_matrix(&k, size, h, w);
        let f = Arc::new(svd(&a)?);
        let pinv = pinv_from_svd(&f, DEFAULT_ZERO_THRESHOLD);
        Ok(Self::new(
            Kind::Dense {
                a: Arc::new(a),
                pinv: Arc::new(pinv),
                blocks: c,
                block_svd: Some(f),
            },
            in_shape.to_vec(),
            in_shape.to_vec(),
            PinvKind::SvdDerived,
        ))
    }

    /// Dense `d x D` operator with an SVD-derived pseudo-inverse; output shape `[d]`.
    pub fn dense(a: Matrix, in_shape: &[usize]) -> Result<Self> {
        Self::check_dense_input(&a, in_shape)?;
        let f = Arc::new(svd(&a)?);
        let pinv = pinv_from_svd(&f, DEFAULT_ZERO_THRESHOLD);
        let op = Self::new(
            Kind::Dense {
                a: Arc::new(a),
                pinv: Arc::new(pinv),
                blocks: 1,
                block_svd: Some(f.clone()),
            },
            in_shape.to_vec(),
            vec![f.out_dim()],
            PinvKind::SvdDerived,
        );
        let _ = op.svd.set(f);
        Ok(op)
    }

    /// Dense operator with a caller-supplied `A†` (which is not checked).
    pub fn dense_with_pinv(a: Matrix, pinv: Matrix, in_shape: &[usize]) -> Result<Self> {
        Self::check_dense_input(&a, in_shape)?;
        if (pinv.rows(), pinv.cols()) != (a.cols(), a.rows()) {
            return Err(Error::DimensionMismatch {
                expected: a.cols() * a.rows(),
                actual: pinv.rows() * pinv.cols(),
                context: "pseudo-inverse must be D x d",
            });
        }
        let d = a.rows();
        Ok(Self::new(
            Kind::Dense {
                a: Arc::new(a),
                pinv: Arc::new(pinv),
                blocks: 1,
                block_svd: None,
            },
            in_shape.to_vec(),
            vec![d],
            PinvKind::HandConstructed,
        ))
    }

    fn check_dense_input(a: &Matrix, in_shape: &[usize]) -> Result<()> {
        let n = checked_numel(in_shape)?;
        if a.cols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: a.cols(),
                context: "matrix columns vs input length",
            });
        }
        checked_numel(&[a.rows()])?;
        check_dense_size(a.rows(), a.cols())
    }

    /// `A = A_1 A_2 ... A_n`: the last operator is applied first.
    pub fn compose(ops: Vec<LinearOperator>) -> Result<Self> {
        let (first, last) = match (ops.first(), ops.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::InvalidParameter("compose needs at least one operator".into())),
        };
        for pair in ops.windows(2) {
            if pair[0].in_dim() != pair[1].out_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].in_dim(),
                    actual: pair[1].out_dim(),
                    context: "compose chain",
                });
            }
        }
        let pinv_kind = if ops.iter().any(|o| o.pinv_kind == PinvKind::SvdDerived) {
            PinvKind::SvdDerived
        } else {
            PinvKind::HandConstructed
        };
        let (in_shape, out_shape) = (last.in_shape.clone(), first.out_shape.clone());
        Ok(Self::new(Kind::Compose(ops), in_shape, out_shape, pinv_kind))
    }

    /// The square projector `A†A` onto the range space of `op`.
    pub fn range_projector(op: LinearOperator) -> Self {
        let shape = op.in_shape.clone();
        let pinv_kind = op.pinv_kind;
        Self::new(Kind::RangeProjector(Box::new(op)), shape.clone(), shape, pinv_kind)
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn in_dim(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_dim(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn pinv_kind(&self) -> PinvKind {
        self.pinv_kind
    }

    /// True for pure masks, whose pseudo-inverse is the operator itself.
    pub fn is_mask(&self) -> bool {
        match &self.kind {
            Kind::Mask { .. } | Kind::Identity => true,
            Kind::Compose(ops) => ops.iter().all(|o| o.is_mask()),
            _ => false,
        }
    }

    pub fn is_square(&self) -> bool {
        self.in_dim() == self.out_dim()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.check_len(self.in_dim(), "operator input")?;
        Ok(Tensor::from_parts(self.forward(x.as_slice()), self.out_shape.clone()))
    }

    pub fn pinv_apply(&self, y: &Tensor) -> Result<Tensor> {
        y.check_len(self.out_dim(), "pseudo-inverse input")?;
        Ok(Tensor::from_parts(self.pinv(y.as_slice()), self.in_shape.clone()))
    }

    pub fn adjoint_apply(&self, y: &Tensor) -> Result<Tensor> {
        y.check_len(self.out_dim(), "adjoint input")?;
        Ok(Tensor::from_parts(self.adjoint(y.as_slice())?, self.in_shape.clone()))
    }

    /// `A†A x`
    pub fn range_project(&self, x: &Tensor) -> Result<Tensor> {
        x.check_len(self.in_dim(), "operator input")?;
        let r = self.pinv(&self.forward(x.as_slice()));
        Ok(Tensor::from_parts(r, x.shape().to_vec()))
    }

    /// `(I - A†A) x`
    pub fn null_project(&self, x: &Tensor) -> Result<Tensor> {
        x.sub(&self.range_project(x)?)
    }

    pub(crate) fn forward(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            Kind::Identity => x.to_vec(),
            Kind::Zero => vec![0.0; self.out_dim()],
            Kind::Grayscale { plane } => (0..*plane)
                .map(|p| (x[p] + x[plane + p] + x[2 * plane + p]) / 3.0)
                .collect(),
            Kind::AvgPool { n } => {
                let (c, h, w) = image_shape(&self.in_shape, "avgpool").expect("checked at build");
                let (oh, ow) = (h / n, w / n);
                let area = (n * n) as f64;
                let mut out = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut sum = 0.0;
                            for di in 0..*n {
                                let row = ch * h * w + (i * n + di) * w + j * n;
                                sum += x[row..row + n].iter().sum::<f64>();
                            }
                            out.push(sum / area);
                        }
                    }
                }
                out
            }
            Kind::Mask { keep } => masked(x, keep),
            Kind::Walsh(rows) => rows.apply(x),
            Kind::Dense { a, blocks, .. } => per_block(x, *blocks, |b| a.mul_vec(b)),
            Kind::Compose(ops) => ops.iter().rev().fold(x.to_vec(), |v, op| op.forward(&v)),
            Kind::RangeProjector(op) => op.pinv(&op.forward(x)),
        }
    }

    pub(crate) fn pinv(&self, y: &[f64]) -> Vec<f64> {
        match &self.kind {
            Kind::Identity => y.to_vec(),
            Kind::Zero => vec![0.0; self.in_dim()],
            Kind::Grayscale { .. } => y.repeat(3),
            Kind::AvgPool { n } => upsample(&self.in_shape, *n, y, 1.0),
            Kind::Mask { keep } => masked(y, keep),
            Kind::Walsh(rows) => rows.adjoint(y),
            Kind::Dense { pinv, blocks, .. } => per_block(y, *blocks, |b| pinv.mul_vec(b)),
            Kind::Compose(ops) => ops.iter().fold(y.to_vec(), |v, op| op.pinv(&v)),
            // A projector is its own pseudo-inverse.
            Kind::RangeProjector(op) => op.pinv(&op.forward(y)),
        }
    }

    pub(crate) fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(match &self.kind {
            Kind::Identity => y.to_vec(),
            Kind::Zero => vec![0.0; self.in_dim()],
            Kind::Grayscale { .. } => y.iter().map(|v| v / 3.0).collect::<Vec<_>>().repeat(3),
            Kind::AvgPool { n } => upsample(&self.in_shape, *n, y, 1.0 / (n * n) as f64),
            Kind::Mask { keep } => masked(y, keep),
            Kind::Walsh(rows) => rows.adjoint(y),
            Kind::Dense { a, blocks, .. } => per_block(y, *blocks, |b| a.mul_vec_transposed(b)),
            Kind::Compose(ops) => {
                let mut v = y.to_vec();
                for op in ops {
                    v = op.adjoint(&v)?;
                }
                v
            }
            Kind::RangeProjector(_) => return Err(incompatible("adjoint of a range projector is not provided")),
        })
    }

    /// Materializes `A` as a `d x D` matrix.
    pub fn to_dense(&self) -> Result<Matrix> {
        let (d, n) = (self.out_dim(), self.in_dim());
        check_dense_size(d, n)?;
        let mut m = Matrix::zeros(d, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            for (i, v) in self.forward(&e).into_iter().enumerate() {
                m[(i, j)] = v;
            }
            e[j] = 0.0;
        }
        Ok(m)
    }

    /// Materializes `A†` as a `D x d` matrix.
    pub fn pinv_to_dense(&self) -> Result<Matrix> {
        let (d, n) = (self.out_dim(), self.in_dim());
        check_dense_size(d, n)?;
        let mut m = Matrix::zeros(n, d);
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            for (i, v) in self.pinv(&e).into_iter().enumerate() {
                m[(i, j)] = v;
            }
            e[j] = 0.0;
        }
        Ok(m)
    }

    /// Full SVD of the materialized operator, computed once and cached.
    pub fn svd(&self) -> Result<Arc<SvdFactors>> {
        if let Some(f) = self.svd.get() {
            return Ok(f.clone());
        }
        check_dense_size(self.out_dim(), self.in_dim())?;
        let f = match &self.kind {
            Kind::Dense {
                blocks,
                block_svd: Some(b),
                ..
            } => b.block_diagonal(*blocks),
            _ => svd(&self.to_dense()?)?,
        };
        Ok(self.svd.get_or_init(|| Arc::new(f)).clone())
    }

    /// Operator acting on the sub-image `window` of every channel, with the window of
    /// the output plane it maps to.
    pub fn restrict(&self, window: Window) -> Result<(LinearOperator, Window)> {
        let (c, h, w) = image_shape(&self.in_shape, "tiling")?;
        if window.row + window.height > h || window.col + window.width > w {
            return Err(Error::InvalidParameter(format!(
                "window {window:?} exceeds image {h}x{w}"
            )));
        }
        let sub_shape = [c, window.height, window.width];
        match &self.kind {
            Kind::Identity => Ok((Self::identity(&sub_shape)?, window)),
            Kind::Grayscale { .. } => Ok((Self::grayscale(&sub_shape)?, window)),
            Kind::AvgPool { n } => {
                let aligned = [window.row, window.col, window.height, window.width]
                    .iter()
                    .all(|v| v % n == 0);
                if !aligned {
                    return Err(incompatible(format!("tile {window:?} is not aligned to avgpool:{n}")));
                }
                let out = Window {
                    row: window.row / n,
                    col: window.col / n,
                    height: window.height / n,
                    width: window.width / n,
                };
                Ok((Self::avgpool(&sub_shape, *n)?, out))
            }
            Kind::Mask { keep } => {
                let mut sub = Vec::with_capacity(window.height * window.width);
                for r in window.row..window.row + window.height {
                    sub.extend_from_slice(&keep[r * w + window.col..r * w + window.col + window.width]);
                }
                Ok((Self::mask(&sub_shape, sub)?, window))
            }
            Kind::Compose(ops) => {
                let mut win = window;
                let mut parts = Vec::with_capacity(ops.len());
                for op in ops.iter().rev() {
                    let (sub, next) = op.restrict(win)?;
                    parts.push(sub);
                    win = next;
                }
                parts.reverse();
                Ok((Self::compose(parts)?, win))
            }
            _ => Err(incompatible(
                "only identity, grayscale, avgpool, mask and their composites can be tiled",
            )),
        }
    }

    /// The same operator on a larger canvas `[C,H',W']` holding the original image in
    /// its top-left corner. Masks keep every added pixel.
    pub fn pad_to(&self, shape: &[usize]) -> Result<LinearOperator> {
        let (c, h, w) = image_shape(&self.in_shape, "padding")?;
        let (pc, ph, pw) = image_shape(shape, "padding")?;
        if pc != c || ph < h || pw < w {
            return Err(Error::InvalidParameter(format!(
                "cannot pad {:?} to {shape:?}",
                self.in_shape
            )));
        }
        match &self.kind {
            Kind::Identity => Self::identity(shape),
            Kind::Grayscale { .. } => Self::grayscale(shape),
            Kind::AvgPool { n } => Self::avgpool(shape, *n),
            Kind::Mask { keep } => {
                let mut padded = vec![true; ph * pw];
                for r in 0..h {
                    padded[r * pw..r * pw + w].copy_from_slice(&keep[r * w..(r + 1) * w]);
                }
                Self::mask(shape, padded)
            }
            Kind::Compose(ops) => {
                let mut cur = shape.to_vec();
                let mut parts = Vec::with_capacity(ops.len());
                for op in ops.iter().rev() {
                    let p = op.pad_to(&cur)?;
                    cur = p.out_shape.clone();
                    parts.push(p);
                }
                parts.reverse();
                Self::compose(parts)
            }
            _ => Err(incompatible(
                "only identity, grayscale, avgpool, mask and their composites can be padded",
            )),
        }
    }
}

fn masked(x: &[f64], keep: &[bool]) -> Vec<f64> {
    let plane = keep.len();
    x.iter()
        .enumerate()
        .map(|(i, &v)| if keep[i % plane] { v } else { 0.0 })
        .collect()
}

fn per_block(x: &[f64], blocks: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    x.chunks_exact(x.len() / blocks).flat_map(f).collect()
}

fn upsample(in_shape: &[usize], n: usize, y: &[f64], scale: f64) -> Vec<f64> {
    let (c, h, w) = image_shape(in_shape, "avgpool").expect("checked at build");
    let (oh, ow) = (h / n, w / n);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[ch * h * w + r * w + col] = y[ch * oh * ow + (r / n) * ow + col / n] * scale;
            }
        }
    }
    out
}

/// Parses `spec` and builds the operator for inputs of shape `in_shape`.
pub fn build_operator(spec: &OperatorSpec, in_shape: &[usize]) -> Result<LinearOperator> {
    build_node(spec.node(), in_shape)
}

/// Parses and builds in one step.
pub fn build_from_text(text: &str, in_shape: &[usize]) -> Result<LinearOperator> {
    build_operator(&OperatorSpec::parse(text)?, in_shape)
}

fn build_node(node: &SpecNode, in_shape: &[usize]) -> Result<LinearOperator> {
    let built = match node {
        SpecNode::Identity => LinearOperator::identity(in_shape),
        SpecNode::Zero(d) => LinearOperator::zero(in_shape, *d),
        SpecNode::Grayscale => LinearOperator::grayscale(in_shape),
        SpecNode::AvgPool(n) => LinearOperator::avgpool(in_shape, *n),
        SpecNode::Mask(path) => LinearOperator::mask_from_pgm(path, in_shape),
        SpecNode::Blur { kind, size } => LinearOperator::blur(in_shape, *kind, *size),
        SpecNode::Walsh { ratio, seed } => LinearOperator::walsh(in_shape, *ratio, *seed),
        SpecNode::Matrix(path) => {
            let t = io::read_ten1(path)?;
            match *t.shape() {
                [d, n] => {
                    let a = Matrix::from_rows(d, n, t.into_vec())?;
                    LinearOperator::dense(a, in_shape)
                }
                ref s => Err(Error::InvalidParameter(format!(
                    "matrix file must have shape [d, D], found {s:?}"
                ))),
            }
        }
        SpecNode::Compose(children) => {
            let mut shape = in_shape.to_vec();
            let mut ops = Vec::with_capacity(children.len());
            for child in children.iter().rev() {
                let op = build_node(child, &shape)?;
                shape = op.out_shape.clone();
                ops.push(op);
            }
            ops.reverse();
            LinearOperator::compose(ops)
        }
    };
    built.map_err(|e| match e {
        Error::InvalidParameter(m) | Error::Incompatible(m) => Error::spec(node.to_string(), m),
        Error::DimensionMismatch { .. } | Error::EmptyTensor(_) | Error::SizeLimit { .. } => {
            Error::spec(node.to_string(), e.to_string())
        }
        other => other,
    })
}

/// Residuals of the pseudo-inverse identities over random Gaussian probes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinvReport {
    pub probes: usize,
    /// `max ‖A A† A x - A x‖_max`
    pub pinv_residual: f64,
    /// `max ‖A (I - A†A) x‖_max`
    pub null_residual: f64,
}

impl PinvReport {
    pub fn max_residual(&self) -> f64 {
        self.pinv_residual.max(self.null_residual)
    }
}

pub fn verify_pinv(op: &LinearOperator, probes: usize, rng: &mut RngStream) -> Result<PinvReport> {
    if probes == 0 {
        return Err(Error::InvalidParameter("verify_pinv needs at least one probe".into()));
    }
    let mut report = PinvReport {
        probes,
        pinv_residual: 0.0,
        null_residual: 0.0,
    };
    for _ in 0..probes {
        let x = gaussian_sample(rng, op.in_shape())?;
        let ax = op.forward(x.as_slice());
        let aapax = op.forward(&op.pinv(&ax));
        let null = op.null_project(&x)?;
        let a_null = op.forward(null.as_slice());
        report.pinv_residual = report.pinv_residual.max(max_abs_diff(&aapax, &ax));
        report.null_residual = report.null_residual.max(max_abs(&a_null));
    }
    Ok(report)
}

/// SVD factors of the materialized operator.
pub fn svd_of(op: &LinearOperator) -> Result<Arc<SvdFactors>> {
    op.svd()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
