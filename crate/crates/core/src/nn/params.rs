use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable tensors of one network, kept in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.vars.values()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; every layer holding it sees the change.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {:?}, expected {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Deep copies of all parameter values.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in snapshot {
            self.assign(name, t)?;
        }
        Ok(())
    }
}

struct BuilderState {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

/// Creates named, seeded parameters. `pp` scopes names with a dotted prefix.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuilderState>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuilderState {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                dtype,
                device: device.clone(),
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            state: self.state.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().dtype
    }

    fn insert(&self, name: &str, values: Vec<f64>, shape: Shape) -> Result<Tensor> {
        let full = self.pp(name).prefix;
        let mut st = self.state.borrow_mut();
        if st.vars.contains_key(&full) {
            return Err(Error::Config(format!("duplicate parameter name {full}")));
        }
        let t = Tensor::from_vec(values, shape, &st.device)?.to_dtype(st.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        st.vars.insert(full, var);
        Ok(out)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&self, name: &str, shape: impl Into<Shape>, bound: f64) -> Result<Tensor> {
        let shape = shape.into();
        let values = {
            let mut st = self.state.borrow_mut();
            (0..shape.elem_count())
                .map(|_| st.rng.random_range(-bound..=bound))
                .collect()
        };
        self.insert(name, values, shape)
    }

    pub fn zeros(&self, name: &str, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        self.insert(name, vec![0.0; shape.elem_count()], shape)
    }

    pub fn ones(&self, name: &str, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        self.insert(name, vec![1.0; shape.elem_count()], shape)
    }

    pub fn finish(self) -> ParamStore {
        let st = self.state.borrow();
        ParamStore {
            vars: st.vars.clone(),
            dtype: st.dtype,
            device: st.device.clone(),
        }
    }
}
