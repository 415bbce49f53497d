//! Dense row-major tensors and the forward kernels used by both the eager and
//! the taped evaluation paths.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {numel} elements, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Row-major matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn transpose(&self) -> Result<Self> {
        self.expect_rank2("transpose")?;
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Converts element type, e.g. to promote `f32` parameters for serialization.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::lit(v.as_f64())).collect() }
    }

    fn expect_rank2(&self, what: &str) -> Result<()> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!("{what} needs a matrix, got shape {:?}", self.shape)));
        }
        Ok(())
    }

    /// Little-endian: `u32` rank, `u32` per dim, then `f64` values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor rank {rank} is implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(r, &mut buf)?;
            data.push(S::lit(f64::from_le_bytes(buf)));
        }
        Self::new(shape, data)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated,
        _ => Error::Io(e),
    })
}

/// Operation kinds understood by [`forward_op`] and the autodiff tape.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind<S> {
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Elementwise sum; the second operand may be a `[1, n]` row or a rank-0 scalar.
    Add,
    /// Elementwise product with the same broadcasting rule as `Add`.
    Mul,
    Tanh,
    Exp,
    /// Sum of every element, producing a rank-0 tensor.
    Sum,
    /// Column range `start..end` of a matrix.
    Slice {
        start: usize,
        end: usize,
    },
    /// Column-wise concatenation of two matrices with equal row counts.
    Concat,
    /// Multiplication by a constant.
    Scale(S),
    /// Addition of a constant.
    Shift(S),
}

impl<S> OpKind<S> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::Slice { .. } => "slice",
            OpKind::Concat => "concat",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::Concat => 2,
            _ => 1,
        }
    }
}

/// How the second operand of `Add`/`Mul` lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Row,
    Scalar,
}

pub(crate) fn broadcast_kind<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Broadcast> {
    if a.shape == b.shape {
        Ok(Broadcast::Same)
    } else if b.rank() == 0 {
        Ok(Broadcast::Scalar)
    } else if a.rank() == 2 && b.rank() == 2 && b.rows() == 1 && b.cols() == a.cols() {
        Ok(Broadcast::Row)
    } else {
        Err(Error::Shape(format!("cannot broadcast {:?} onto {:?}", b.shape, a.shape)))
    }
}

fn zip_broadcast<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
    let data = match broadcast_kind(a, b)? {
        Broadcast::Same => a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => {
            let y = b.data[0];
            a.data.iter().map(|&x| f(x, y)).collect()
        }
        Broadcast::Row => {
            let n = a.cols();
            a.data.chunks(n).flat_map(|row| row.iter().zip(&b.data).map(|(&x, &y)| f(x, y))).collect()
        }
    };
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub(crate) fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.expect_rank2("matmul")?;
    b.expect_rank2("matmul")?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape, b.shape)));
    }
    let mut out = vec![S::zero(); m * n];
    for (arow, orow) in a.data.chunks(k.max(1)).zip(out.chunks_mut(n.max(1))) {
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `a^T b` without materializing the transpose.
pub(crate) fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![S::zero(); k * n];
    for r in 0..m {
        let arow = &a.data[r * k..(r + 1) * k];
        let brow = &b.data[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![k, n], data: out }
}

/// `a b^T` without materializing the transpose.
pub(crate) fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

fn slice_cols<S: Scalar>(a: &Tensor<S>, start: usize, end: usize) -> Result<Tensor<S>> {
    a.expect_rank2("slice")?;
    if start > end || end > a.cols() {
        return Err(Error::Shape(format!("slice {start}..{end} of {:?}", a.shape)));
    }
    let n = a.cols();
    let data = (0..a.rows()).flat_map(|r| a.data[r * n + start..r * n + end].iter().copied()).collect();
    Ok(Tensor { shape: vec![a.rows(), end - start], data })
}

fn concat_cols<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.expect_rank2("concat")?;
    b.expect_rank2("concat")?;
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!("concat {:?} with {:?}", a.shape, b.shape)));
    }
    let (na, nb) = (a.cols(), b.cols());
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for r in 0..a.rows() {
        data.extend_from_slice(&a.data[r * na..(r + 1) * na]);
        data.extend_from_slice(&b.data[r * nb..(r + 1) * nb]);
    }
    Ok(Tensor { shape: vec![a.rows(), na + nb], data })
}

/// Evaluates one operation. Fails on incompatible shapes or a non-finite result.
pub fn forward_op<S: Scalar>(kind: &OpKind<S>, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if inputs.len() != kind.arity() {
        return Err(Error::Shape(format!("{} takes {} inputs, got {}", kind.name(), kind.arity(), inputs.len())));
    }
    let a = inputs[0];
    let out = match kind {
        OpKind::MatMul => matmul(a, inputs[1])?,
        OpKind::Add => zip_broadcast(a, inputs[1], |x, y| x + y)?,
        OpKind::Mul => zip_broadcast(a, inputs[1], |x, y| x * y)?,
        OpKind::Tanh => a.map(S::tanh),
        OpKind::Exp => a.map(S::exp),
        OpKind::Sum => Tensor::scalar(a.data.iter().copied().sum()),
        OpKind::Slice { start, end } => slice_cols(a, *start, *end)?,
        OpKind::Concat => concat_cols(a, inputs[1])?,
        OpKind::Scale(c) => a.map(|v| v * *c),
        OpKind::Shift(c) => a.map(|v| v + *c),
    };
    if !out.is_finite() {
        return Err(Error::NonFinite(kind.name().to_string()));
    }
    Ok(out)
}
