//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! The tape is rebuilt on every forward pass (shapes may change between
//! steps, e.g. with a different number of grid queries), evaluated eagerly,
//! and swept once in reverse for gradients. Values are `f64` in verification
//! mode and `f32` in training mode; both instantiate the same generic code.

mod conv;

pub use conv::out_spatial;

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

use crate::error::{Error, Result};

/// Scalar types the tape can run on.
pub trait TapeFloat:
    ndarray::NdFloat + num_traits::Float + num_traits::FromPrimitive + 'static
{
}
impl TapeFloat for f32 {}
impl TapeFloat for f64 {}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Input,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    MatMul(usize, usize),
    Transpose2(usize),
    Conv3 {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
    },
    Relu(usize),
    Softplus(usize),
    SoftmaxRows(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    Reshape(usize),
    Sum(usize),
}

struct Node<F> {
    value: ArrayD<F>,
    op: Op<F>,
    grad: Option<ArrayD<F>>,
}

/// Reverse-mode tape. Nodes are appended in topological order by
/// construction; `backward` sweeps them once in reverse.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: TapeFloat> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op: op.into(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<F: TapeFloat> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Leaf node holding a value (parameter or constant input).
    pub fn input(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let v = av.dot(&bv).into_dyn();
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose2(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 2 {
            return Err(shape_err("transpose2", self.shape(a), &[]));
        }
        let v = self.nodes[a.0].value.t().to_owned();
        Ok(self.push(v, Op::Transpose2(a.0)))
    }

    /// 3D convolution, kernel 3, padding 1.
    /// input `[C_in,D,H,W]`, kernel `[C_out,C_in,3,3,3]`, bias `[C_out]`.
    pub fn conv3(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let ok = si.len() == 4
            && sk.len() == 5
            && sb.len() == 1
            && sk[1] == si[0]
            && sk[0] == sb[0]
            && sk[2..] == [3, 3, 3]
            && (stride == 1 || stride == 2);
        if !ok {
            return Err(shape_err("conv3", si, sk));
        }
        let v = conv::conv3_forward(
            &self.nodes[input.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
            stride,
        );
        Ok(self.push(
            v,
            Op::Conv3 {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
                stride,
            },
        ))
    }

    /// ReLU with the zero subgradient at the origin.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(F::zero()));
        self.push(v, Op::Relu(a.0))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(softplus_stable);
        self.push(v, Op::Softplus(a.0))
    }

    /// Row-wise softmax of a 2D array.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 2 {
            return Err(shape_err("softmax_rows", self.shape(a), &[]));
        }
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.axis_iter_mut(Axis(0)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        Ok(self.push(v, Op::SoftmaxRows(a.0)))
    }

    /// Concatenate two 2D arrays along columns (channel axis).
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat_cols", sa, sb));
        }
        let v = ndarray::concatenate(
            Axis(1),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .unwrap();
        Ok(self.push(v, Op::ConcatCols(a.0, b.0)))
    }

    /// Columns `[start, end)` of a 2D array.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 || end > sa[1] || start >= end {
            return Err(shape_err("slice_cols", sa, &[start, end]));
        }
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned()
            .into_dyn();
        Ok(self.push(v, Op::SliceCols(a.0, start, end)))
    }

    /// Reshape to a new shape with the same element count.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = self.shape(a).iter().product();
        let m: usize = shape.iter().product();
        if n != m {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let flat: Vec<F> = self.nodes[a.0].value.iter().copied().collect();
        let v = ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap();
        Ok(self.push(v, Op::Reshape(a.0)))
    }

    /// Sum of all elements, as a 0-d array.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(v, Op::Sum(a.0))
    }

    fn accumulate(&mut self, id: usize, contribution: ArrayD<F>) {
        match &mut self.nodes[id].grad {
            Some(g) => *g = &*g + &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), F::one());
        self.backward_seeded(&[(loss, seed)])
    }

    /// Reverse sweep seeded with explicit output gradients; used when the
    /// loss continues outside the tape (through the warp and the objective)
    /// and its gradient with respect to tape outputs is known.
    pub fn backward_seeded(&mut self, seeds: &[(NodeId, ArrayD<F>)]) -> Result<()> {
        for (id, seed) in seeds {
            if seed.shape() != self.shape(*id) {
                return Err(shape_err("backward seed", seed.shape(), self.shape(*id)));
            }
            self.accumulate(id.0, seed.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            match self.nodes[i].op.clone() {
                Op::Input => {}
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b].value;
                    let gb = &g * &self.nodes[a].value;
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, g.mapv(|x| x * c));
                }
                Op::MatMul(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
                    let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
                    let ga = g2.dot(&bv.t()).into_dyn();
                    let gb = av.t().dot(&g2).into_dyn();
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Transpose2(a) => {
                    self.accumulate(a, g.t().to_owned());
                }
                Op::Conv3 {
                    input,
                    kernel,
                    bias,
                    stride,
                } => {
                    let (di, dk, db) = conv::conv3_backward(
                        &self.nodes[input].value,
                        &self.nodes[kernel].value,
                        &g,
                        stride,
                    );
                    self.accumulate(input, di);
                    self.accumulate(kernel, dk);
                    self.accumulate(bias, db);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a].value.mapv(|x| {
                        if x > F::zero() {
                            F::one()
                        } else {
                            F::zero()
                        }
                    });
                    self.accumulate(a, &g * &mask);
                }
                Op::Softplus(a) => {
                    let s = self.nodes[a].value.mapv(sigmoid_stable);
                    self.accumulate(a, &g * &s);
                }
                Op::SoftmaxRows(a) => {
                    // Row-wise Jacobian-vector product: y ⊙ (g − <g, y>).
                    let y = self.nodes[i].value.clone();
                    let mut out = ArrayD::<F>::zeros(y.raw_dim());
                    for (mut orow, (yrow, grow)) in out
                        .axis_iter_mut(Axis(0))
                        .zip(y.axis_iter(Axis(0)).zip(g.axis_iter(Axis(0))))
                    {
                        let dot = yrow
                            .iter()
                            .zip(grow.iter())
                            .fold(F::zero(), |acc, (a, b)| acc + *a * *b);
                        for ((o, y), g) in orow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                            *o = *y * (*g - dot);
                        }
                    }
                    self.accumulate(a, out);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a].value.shape()[1];
                    let ga = g.slice(ndarray::s![.., ..ca]).to_owned().into_dyn();
                    let gb = g.slice(ndarray::s![.., ca..]).to_owned().into_dyn();
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = ArrayD::<F>::zeros(self.nodes[a].value.raw_dim());
                    ga.slice_mut(ndarray::s![.., start..end])
                        .assign(&g.view().into_dimensionality::<Ix2>().unwrap());
                    self.accumulate(a, ga);
                }
                Op::Reshape(a) => {
                    let flat: Vec<F> = g.iter().copied().collect();
                    let ga =
                        ArrayD::from_shape_vec(self.nodes[a].value.raw_dim(), flat).unwrap();
                    self.accumulate(a, ga);
                }
                Op::Sum(a) => {
                    let s = g.iter().copied().fold(F::zero(), |acc, v| acc + v);
                    let ga = ArrayD::from_elem(self.nodes[a].value.raw_dim(), s);
                    self.accumulate(a, ga);
                }
            }
        }
        Ok(())
    }
}

fn softplus_stable<F: TapeFloat>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_stable<F: TapeFloat>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Per-parameter outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (name, max relative error over sampled entries)
    pub per_param: Vec<(String, f64)>,
    pub tolerance: f64,
    pub passed: bool,
    /// Names of parameters exceeding the tolerance.
    pub failures: Vec<String>,
}

fn relative_error(a: f64, fd: f64) -> f64 {
    let denom = a.abs().max(fd.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (a - fd).abs() / denom
    }
}

/// Compare analytic gradients against central finite differences of `eval`,
/// sampling `samples` entries per parameter (all entries when a tensor is
/// smaller than that). `eval` receives the full parameter list.
pub fn fd_check(
    params: &[(String, ArrayD<f64>)],
    analytic: &[ArrayD<f64>],
    eval: &mut dyn FnMut(&[ArrayD<f64>]) -> f64,
    tolerance: f64,
    samples: usize,
    seed: u64,
) -> GradCheckReport {
    use rand::Rng;
    let step = 1e-5;
    let mut rng = crate::rng::stream(seed, "autodiff.fdcheck", 0);
    let mut per_param = Vec::new();
    let mut failures = Vec::new();
    let values: Vec<ArrayD<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    for (p_idx, (name, value)) in params.iter().enumerate() {
        let n = value.len();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut max_err = 0.0f64;
        for &flat_idx in &picks {
            let mut hi = values.clone();
            let mut lo = values.clone();
            *hi[p_idx].iter_mut().nth(flat_idx).unwrap() += step;
            *lo[p_idx].iter_mut().nth(flat_idx).unwrap() -= step;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * step);
            let a = analytic[p_idx].iter().copied().nth(flat_idx).unwrap();
            max_err = max_err.max(relative_error(a, fd));
        }
        if max_err > tolerance {
            failures.push(name.clone());
        }
        per_param.push((name.clone(), max_err));
    }
    GradCheckReport {
        per_param,
        tolerance,
        passed: failures.is_empty(),
        failures,
    }
}

/// Build the graph with `builder`, compute analytic gradients by one reverse
/// sweep, and verify them against central finite differences (step 1e-5 on
/// 64-bit values).
///
/// `builder` receives the parameter nodes in order and returns the scalar
/// loss node.
pub fn gradcheck<B>(
    params: Vec<(String, ArrayD<f64>)>,
    builder: B,
    tolerance: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|(_, v)| tape.input(v.clone()))
        .collect();
    let loss = builder(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<ArrayD<f64>> = ids
        .iter()
        .zip(&params)
        .map(|(id, (_, v))| {
            tape.grad(*id)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(v.raw_dim()))
        })
        .collect();
    let mut eval = |values: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| t.input(v.clone())).collect();
        let loss = builder(&mut t, &ids).expect("builder succeeded once");
        t.value(loss).iter().copied().next().unwrap()
    };
    Ok(fd_check(
        &params, &analytic, &mut eval, tolerance, samples, seed,
    ))
}
