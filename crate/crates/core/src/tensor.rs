//! Dense tensors and ordered, named model states.
//!
//! A [`ModelState`] is the unit that moves between the server and the
//! clients. Equality on tensors is bit-exact: two tensors are equal only if
//! their dims, dtype and the raw bit patterns of every element agree.

use std::fmt;

use thiserror::Error;

/// Largest tensor rank representable in the wire format (rank is one byte).
pub const MAX_RANK: usize = u8::MAX as usize;
/// Longest entry name representable in the wire format (16-bit length).
pub const MAX_NAME_LEN: usize = u16::MAX as usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("tensor must have at least one dimension")]
    EmptyDims,
    #[error("dimension {index} has extent 0")]
    ZeroExtent { index: usize },
    #[error("rank {0} exceeds the maximum of {MAX_RANK}")]
    RankTooLarge(usize),
    #[error("extent {0} does not fit in 32 bits")]
    ExtentTooLarge(usize),
    #[error("dims {dims:?} imply {expected} elements but data has {actual}")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("name not found: {0}")]
    NameNotFound(String),
    #[error("duplicate entry name: {0}")]
    DuplicateName(String),
    #[error("entry name is {0} bytes, longer than {MAX_NAME_LEN}")]
    NameTooLong(usize),
    #[error("expected a rank-2 tensor, got dims {0:?}")]
    NotAMatrix(Vec<usize>),
}

/// Element type code. The discriminant is the wire code.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl Eq for TensorData {}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

fn check_dims(dims: &[usize], len: usize) -> Result<(), TensorError> {
    if dims.is_empty() {
        return Err(TensorError::EmptyDims);
    }
    if dims.len() > MAX_RANK {
        return Err(TensorError::RankTooLarge(dims.len()));
    }
    let mut expected: usize = 1;
    for (index, &d) in dims.iter().enumerate() {
        if d == 0 {
            return Err(TensorError::ZeroExtent { index });
        }
        if d > u32::MAX as usize {
            return Err(TensorError::ExtentTooLarge(d));
        }
        expected = expected.saturating_mul(d);
    }
    if expected != len {
        return Err(TensorError::LengthMismatch {
            dims: dims.to_vec(),
            expected,
            actual: len,
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        check_dims(&dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F64(data))
    }

    /// Builds a tensor of `dtype` from f64 values, rounding when the target is F32.
    pub fn from_f64_as(dims: Vec<usize>, values: Vec<f64>, dtype: DType) -> Result<Self, TensorError> {
        let data = match dtype {
            DType::F64 => TensorData::F64(values),
            DType::F32 => TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
        };
        Self::new(dims, data)
    }

    pub fn zeros(dims: Vec<usize>, dtype: DType) -> Result<Self, TensorError> {
        let n = dims.iter().product();
        Self::from_f64_as(dims, vec![0.0; n], dtype)
    }

    pub fn scalar_vec(values: &[f64], dtype: DType) -> Result<Self, TensorError> {
        Self::from_f64_as(vec![values.len()], values.to_vec(), dtype)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the raw element payload in bytes.
    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype().size_of()
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn matrix_shape(&self) -> Result<(usize, usize), TensorError> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotAMatrix(self.dims.clone())),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        Tensor {
            dims: self.dims.clone(),
            data: match dtype {
                DType::F64 => TensorData::F64(self.to_f64_vec()),
                DType::F32 => TensorData::F32(self.to_f64_vec().into_iter().map(|v| v as f32).collect()),
            },
        }
    }

    /// Same dims and dtype.
    pub fn same_signature(&self, other: &Tensor) -> bool {
        self.dims == other.dims && self.dtype() == other.dtype()
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// An insertion-ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelState {
    entries: Vec<(String, Tensor)>,
}

impl ModelState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<I, S>(entries: I) -> Result<Self, TensorError>
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: Into<String>,
    {
        let mut state = Self::new();
        for (name, tensor) in entries {
            state.insert(name, tensor)?;
        }
        Ok(state)
    }

    /// Appends a new entry. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if name.len() > MAX_NAME_LEN {
            return Err(TensorError::NameTooLong(name.len()));
        }
        if self.contains(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Replaces the tensor stored under an existing name, keeping its position.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<Tensor, TensorError> {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| TensorError::NameNotFound(name.to_string()))?;
        Ok(std::mem::replace(&mut slot.1, tensor))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| TensorError::NameNotFound(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total raw element bytes over all entries (headers excluded).
    pub fn payload_bytes(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.byte_len()).sum()
    }

    /// True when both states have the same names, in the same order, with
    /// matching dims and dtypes.
    pub fn same_signature(&self, other: &ModelState) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.same_signature(tb))
    }

    pub fn cast(&self, dtype: DType) -> ModelState {
        ModelState {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast(dtype))).collect(),
        }
    }
}

/// Free-function lookup mirroring [`ModelState::get`].
pub fn state_get<'a>(state: &'a ModelState, name: &str) -> Result<&'a Tensor, TensorError> {
    state.get(name)
}

impl fmt::Display for ModelState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModelState[")?;
        for (i, (name, t)) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{name}: {:?}{:?}", t.dtype(), t.dims())?;
        }
        write!(f, "]")
    }
}
