use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tap, Var};
use crate::error::{Error, Result};
use crate::params::{self, Bound, ParamId, ParamStore};
use crate::tensor::Real;

/// Categories known to the synthetic corpus: three whole/part pairs and two
/// standalone kinds.
pub const DEFAULT_VOCABULARY: [&str; 8] = [
    "vehicle", "plate", "animal", "head", "person", "face", "ball", "sign",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "token", rename_all = "snake_case")]
pub enum GuidanceKind {
    Learnable,
    Category(usize),
}

/// A `C`-vector steering the guided convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceFeature<T> {
    pub kind: GuidanceKind,
    pub vector: Vec<T>,
}

/// Row 0 holds the shared learnable proposal vector; row `i + 1` embeds
/// vocabulary token `i`.
#[derive(Debug, Clone)]
pub struct GuidanceTable {
    table: ParamId,
    vocabulary: Vec<String>,
    channels: usize,
}

impl GuidanceTable {
    pub fn register<T: Real, R: Rng + ?Sized>(
        vocabulary: &[String],
        channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let table = store.push(
            "guidance.table",
            params::normal(rng, &[vocabulary.len() + 1, channels], 1.0),
        );
        Self {
            table,
            vocabulary: vocabulary.to_vec(),
            channels,
        }
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn kind_for(&self, category: Option<&str>) -> Result<GuidanceKind> {
        match category {
            None => Ok(GuidanceKind::Learnable),
            Some(name) => self
                .vocabulary
                .iter()
                .position(|v| v == name)
                .map(GuidanceKind::Category)
                .ok_or_else(|| Error::Vocabulary(name.to_string())),
        }
    }

    fn row(&self, kind: GuidanceKind) -> usize {
        match kind {
            GuidanceKind::Learnable => 0,
            GuidanceKind::Category(i) => i + 1,
        }
    }

    pub fn make_guidance<T: Real>(
        &self,
        store: &ParamStore<T>,
        category: Option<&str>,
    ) -> Result<GuidanceFeature<T>> {
        let kind = self.kind_for(category)?;
        let r = self.row(kind) * self.channels;
        let vector = store.get(self.table).value.data[r..r + self.channels].to_vec();
        Ok(GuidanceFeature { kind, vector })
    }

    /// The selected row as a `1 x C` node, differentiable into the table.
    pub fn lookup<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, kind: GuidanceKind) -> Var {
        let tap = Tap {
            out: 0,
            src: self.row(kind) as u32,
            weight: T::one(),
        };
        g.gather(bound.var(self.table), vec![tap], &[1, self.channels])
    }
}
