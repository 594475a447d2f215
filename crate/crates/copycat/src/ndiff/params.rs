//! Named parameter storage: seeded initialization, gradient accumulators,
//! and the versioned binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::Tensor;
use super::NdiffError;

const MAGIC: &[u8; 4] = b"NDIF";
const FORMAT_VERSION: u32 = 1;

/// How a parameter was initialized; matrices get Xavier-uniform draws,
/// vectors small normal noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Matrix,
    Vector,
}

#[derive(Debug, Clone)]
struct Param {
    value: Rc<Tensor>,
    grad: Tensor,
    kind: InitKind,
}

/// All learned tensors, keyed by name. Iteration order is the name order,
/// which keeps every consumer (optimizer, serializer, gradient checker)
/// deterministic.
#[derive(Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl Clone for ParameterStore {
    /// Deep copy: the clone owns fresh tensors so mutating one store never
    /// touches the other.
    fn clone(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|(name, p)| {
                let fresh =
                    Param { value: Rc::new((*p.value).clone()), grad: p.grad.clone(), kind: p.kind };
                (name.clone(), fresh)
            })
            .collect();
        ParameterStore { params }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    fn insert(&mut self, name: &str, value: Tensor, kind: InitKind) {
        let grad = Tensor::zeros(value.shape().to_vec());
        let prev = self.params.insert(name.to_string(), Param { value: Rc::new(value), grad, kind });
        assert!(prev.is_none(), "duplicate parameter {name:?}");
    }

    /// Registers an explicitly-valued parameter (hand-built test models,
    /// checkpoint loading); kind follows the rank.
    pub fn register(&mut self, name: &str, value: Tensor) {
        let kind = if value.rank() == 2 { InitKind::Matrix } else { InitKind::Vector };
        self.insert(name, value, kind);
    }

    /// Xavier-uniform matrix: U(−l, l) with l = √(6/(rows+cols)).
    pub fn register_matrix(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid uniform bounds");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data), InitKind::Matrix);
    }

    /// Scaled normal vector: N(0, 0.1²) per coordinate.
    pub fn register_vector(&mut self, name: &str, dim: usize, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, 0.1).expect("valid normal parameters");
        let data = (0..dim).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::vector(data), InitKind::Vector);
    }

    /// Overwrites one row of a matrix parameter with zeros (the frozen PAD
    /// embedding row).
    pub fn zero_row(&mut self, name: &str, row: usize) {
        let value = self.value_mut(name);
        value.row_mut(row).fill(0.0);
    }

    pub fn kind(&self, name: &str) -> InitKind {
        self.get(name).kind
    }

    fn get(&self, name: &str) -> &Param {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.get(name).value
    }

    pub(super) fn value_rc(&self, name: &str) -> Rc<Tensor> {
        Rc::clone(&self.get(name).value)
    }

    /// Mutable access to a parameter value; panics if any tape still holds
    /// the tensor, enforcing the drop-graphs-before-update contract.
    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        let param =
            self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        Rc::get_mut(&mut param.value)
            .expect("parameter is still referenced by a live computation graph")
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.get(name).grad
    }

    pub fn zero_grads(&mut self) {
        for param in self.params.values_mut() {
            param.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `delta` into the gradient accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) {
        let param =
            self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        assert_eq!(param.grad.shape(), delta.shape(), "gradient shape mismatch for {name:?}");
        for (g, &d) in param.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }

    /// Visits (name, value, grad) pairs in name order for the optimizer.
    pub fn update_each(&mut self, mut f: impl FnMut(&str, &mut Tensor, &Tensor)) {
        for (name, param) in self.params.iter_mut() {
            let value = Rc::get_mut(&mut param.value)
                .expect("parameter is still referenced by a live computation graph");
            f(name, value, &param.grad);
        }
    }

    /// Global L2 norm of all gradient accumulators.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for param in self.params.values_mut() {
            for g in param.grad.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NdiffError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, param) in &self.params {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(param.value.rank() as u64).to_le_bytes())?;
            for &dim in param.value.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &v in param.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NdiffError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NdiffError::BadCheckpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(NdiffError::BadCheckpoint(format!(
                "format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let count = read_u64(&mut r)? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| NdiffError::BadCheckpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let kind = if rank == 2 { InitKind::Matrix } else { InitKind::Vector };
            if store.contains(&name) {
                return Err(NdiffError::BadCheckpoint(format!("duplicate parameter {name:?}")));
            }
            store.insert(&name, Tensor::new(shape, data), kind);
        }
        Ok(store)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NdiffError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NdiffError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
