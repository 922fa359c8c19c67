use std::collections::HashMap;
use std::fmt;

use super::tape::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Routing label deciding which losses may update a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Shared,
    ImageBranch,
    VideoBranch,
    HeadImage,
    HeadVideo,
    HeadAuxImage,
    HeadAuxVideo,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Shared,
        Group::ImageBranch,
        Group::VideoBranch,
        Group::HeadImage,
        Group::HeadVideo,
        Group::HeadAuxImage,
        Group::HeadAuxVideo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Shared => "shared",
            Group::ImageBranch => "image_branch",
            Group::VideoBranch => "video_branch",
            Group::HeadImage => "head_image",
            Group::HeadVideo => "head_video",
            Group::HeadAuxImage => "head_aux_image",
            Group::HeadAuxVideo => "head_aux_video",
        }
    }

    pub fn is_aux_head(self) -> bool {
        matches!(self, Group::HeadAuxImage | Group::HeadAuxVideo)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub group: Group,
    /// Running statistics and counters are stored as non-trainable parameters.
    pub trainable: bool,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered registry of named parameters. Registration order is the
/// serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, group: Group, trainable: bool, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            group,
            trainable,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Element count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Records parameter `id` as a tape leaf.
    pub fn leaf(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        let p = &self.params[id.0];
        tape.param(id.0, &p.value, p.trainable)
    }

    /// Adds the tape's parameter gradients into the stored gradient buffers.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Grads<T>) {
        for (pid, var) in tape.param_vars() {
            let Some(g) = grads.get(var) else { continue };
            let p = &mut self.params[pid];
            if !p.trainable {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, &d)| *a += d),
                slot => *slot = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec()).expect("grad shape")),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Sum of absolute gradient entries over the parameters of `group`.
    pub fn grad_l1(&self, group: Group) -> f64 {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64().abs())
            .sum()
    }

    /// Drops every parameter matching `pred`, keeping the relative order of the rest.
    pub fn retain(&mut self, mut keep: impl FnMut(&Parameter<T>) -> bool) {
        self.params.retain(|p| keep(p));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }
}
