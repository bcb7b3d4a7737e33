use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::autodiff::{Gradients, Graph, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameter groups: the shared encoder and the two direction stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    Forward,
    Backward,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Forward, Group::Backward];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GradState {
    Zeroed,
    Accumulated,
    Consumed,
}

/// Named parameter table with per-parameter gradient accumulators and
/// freeze flags.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    state: GradState,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            state: GradState::Zeroed,
        }
    }
}

/// Graph leaves for the parameters of one forward pass.
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter group was not bound to this graph")
    }

    /// Substitutes `var` for one parameter, e.g. to differentiate with
    /// respect to it in isolation.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }
}

impl ParamStore {
    pub(crate) fn add(
        &mut self,
        name: String,
        group: Group,
        shape: &[usize],
        rng: &mut ChaCha8Rng,
        scale: f64,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("parameter shape");
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            group,
            grad: Tensor::zeros(shape),
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn group_values(&self, group: Group) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .all(|p| p.frozen)
    }

    /// Creates leaves for every parameter in `groups`; frozen parameters become
    /// constants so no gradient is computed for them.
    pub fn bind(&self, g: &Graph, groups: &[Group]) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                groups.contains(&p.group).then(|| {
                    if p.frozen {
                        g.constant(p.value.clone())
                    } else {
                        g.param(p.value.clone())
                    }
                })
            })
            .collect();
        Binding { vars }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        self.state = GradState::Zeroed;
    }

    /// Adds `scale * grad` for every bound parameter into its accumulator.
    pub fn accumulate(
        &mut self,
        binding: &Binding,
        grads: &Gradients,
        scale: f64,
    ) -> Result<(), ModelError> {
        if self.state == GradState::Consumed {
            return Err(ModelError::StaleGradients);
        }
        for (p, v) in self.params.iter_mut().zip(&binding.vars) {
            let Some(v) = v else { continue };
            if let Some(g) = grads.raw(*v) {
                for (acc, &x) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += scale * x;
                }
            }
        }
        self.state = GradState::Accumulated;
        Ok(())
    }

    /// Adds an already-summed gradient table (one tensor per parameter).
    pub fn accumulate_raw(&mut self, grads: &[Tensor]) -> Result<(), ModelError> {
        if self.state == GradState::Consumed {
            return Err(ModelError::StaleGradients);
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (acc, &x) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += x;
            }
        }
        self.state = GradState::Accumulated;
        Ok(())
    }

    /// Hands the accumulated gradients to an optimizer. Fails if they were
    /// already consumed since the last [`ParamStore::zero_grads`].
    pub fn take_grads_for_step(&mut self) -> Result<&mut [Param], ModelError> {
        match self.state {
            GradState::Consumed => Err(ModelError::StaleGradients),
            _ => {
                self.state = GradState::Consumed;
                Ok(&mut self.params)
            }
        }
    }

    pub fn grads_fresh(&self) -> bool {
        self.state != GradState::Consumed
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[p.value.rank() as u8])?;
            for &d in p.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("ddck.tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_checkpoint(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Copies values for parameters of `groups` from a checkpoint. Every
    /// selected parameter must be present with a matching shape.
    pub fn load_groups(&mut self, path: &Path, groups: &[Group]) -> Result<(), ModelError> {
        let bytes = fs::read(path)?;
        let entries = read_checkpoint(&bytes).map_err(|msg| ModelError::Checkpoint {
            path: path.display().to_string(),
            msg,
        })?;
        let by_name: HashMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in self.params.iter_mut().filter(|p| groups.contains(&p.group)) {
            let t = by_name
                .get(p.name.as_str())
                .ok_or_else(|| ModelError::Checkpoint {
                    path: path.display().to_string(),
                    msg: format!("missing parameter {}", p.name),
                })?;
            if t.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint {
                    path: path.display().to_string(),
                    msg: format!(
                        "parameter {} has shape {:?}, model expects {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    ),
                });
            }
            p.value = (*t).clone();
        }
        Ok(())
    }
}

/// Parses a checkpoint image into `(name, tensor)` pairs in file order.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, String> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| "truncated header".to_string())?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let u32_at = |r: &mut &[u8]| -> Result<u32, String> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| "truncated checkpoint".to_string())?;
        Ok(u32::from_le_bytes(b))
    };
    let version = u32_at(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = u32_at(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)
            .map_err(|_| "truncated name length".to_string())?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)
            .map_err(|_| "truncated name".to_string())?;
        let name =
            String::from_utf8(name).map_err(|_| "parameter name is not UTF-8".to_string())?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)
            .map_err(|_| "truncated rank".to_string())?;
        let shape = (0..rank[0])
            .map(|_| u32_at(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)
                .map_err(|_| format!("truncated data for {name}"))?;
            data.push(f64::from_le_bytes(b8));
        }
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    Ok(out)
}
