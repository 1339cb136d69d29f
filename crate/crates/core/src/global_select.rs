//! Clean-set construction: each modality's expert ranks the whole training
//! set by loss and keeps its `ceil(p * n)` smallest; the clean set is the
//! union of the three selections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cross_training::small_loss_select;
use crate::error::{Error, Result};
use crate::model::{Classifier, Mode};
use crate::noise::{selector_quality_indices, SelectorQuality};
use crate::skeleton::Modality;
use crate::stream::ModalityStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub modality: Modality,
    pub ids: Vec<String>,
    pub losses: Vec<f64>,
}

/// Per-sample eval-mode cross-entropy against the stream's labels.
///
/// Every sample gets an independent forward pass, so the values do not depend
/// on batching.
pub fn rank_by_loss(model: &dyn Classifier, stream: &ModalityStream) -> Result<LossTable> {
    if model.mode() != Mode::Eval {
        return Err(Error::InvalidConfig("loss ranking requires an eval-mode model".into()));
    }
    let all: Vec<usize> = (0..stream.len()).collect();
    let losses = model.per_sample_loss(&stream.refs(&all), &stream.labels)?;
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::CorruptModel(stream.ids[i].clone()));
    }
    Ok(LossTable {
        modality: stream.modality,
        ids: stream.ids.clone(),
        losses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSelection {
    pub fraction: f64,
    pub ids: Vec<String>,
    /// Row indices chosen per modality, ascending, in `Modality::ALL` order.
    pub per_modality: [Vec<usize>; 3],
    /// Row indices of the union, ascending.
    pub union: Vec<usize>,
    /// Bit `m` set when modality `m` chose the row; parallel to `union`.
    pub membership: Vec<u8>,
}

impl GlobalSelection {
    pub fn union_ids(&self) -> Vec<&str> {
        self.union.iter().map(|&i| self.ids[i].as_str()).collect()
    }

    pub fn manifest(&self, corrupted: Option<&[bool]>) -> Result<SelectionManifest> {
        let ids_of = |rows: &[usize]| rows.iter().map(|&i| self.ids[i].clone()).collect::<Vec<_>>();
        let mut per_modality = BTreeMap::new();
        for m in Modality::ALL {
            per_modality.insert(m, ids_of(&self.per_modality[m.index()]));
        }
        let quality = match corrupted {
            Some(mask) => {
                let mut q = BTreeMap::new();
                for m in Modality::ALL {
                    q.insert(m.name().to_string(), selector_quality_indices(&self.per_modality[m.index()], mask)?);
                }
                q.insert("union".to_string(), selector_quality_indices(&self.union, mask)?);
                Some(q)
            }
            None => None,
        };
        Ok(SelectionManifest {
            fraction: self.fraction,
            per_modality,
            union: ids_of(&self.union),
            membership: self
                .union
                .iter()
                .zip(&self.membership)
                .map(|(&i, &mask)| Membership {
                    sample_id: self.ids[i].clone(),
                    modalities: mask,
                })
                .collect(),
            quality,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub sample_id: String,
    /// Bit 0 joint, bit 1 bone, bit 2 motion.
    pub modalities: u8,
}

/// Serialized form of a [`GlobalSelection`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub fraction: f64,
    pub per_modality: BTreeMap<Modality, Vec<String>>,
    pub union: Vec<String>,
    pub membership: Vec<Membership>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quality: Option<BTreeMap<String, SelectorQuality>>,
}

/// Union of the per-modality `ceil(p * n)` smallest-loss selections.
pub fn select_clean(tables: &[LossTable; 3], fraction: f64) -> Result<GlobalSelection> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("selection fraction {fraction} outside (0, 1]")));
    }
    let ids = &tables[0].ids;
    for t in &tables[1..] {
        if &t.ids != ids {
            return Err(Error::Inconsistent(format!(
                "{} table covers different samples than {}",
                t.modality, tables[0].modality
            )));
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut mask = vec![0u8; ids.len()];
    let mut per_modality: [Vec<usize>; 3] = Default::default();
    for (m, table) in tables.iter().enumerate() {
        let chosen = small_loss_select(&table.losses, fraction)?;
        for &i in &chosen {
            mask[i] |= 1 << m;
        }
        per_modality[m] = chosen;
    }
    let union: Vec<usize> = (0..ids.len()).filter(|&i| mask[i] != 0).collect();
    let membership = union.iter().map(|&i| mask[i]).collect();
    Ok(GlobalSelection {
        fraction,
        ids: ids.clone(),
        per_modality,
        union,
        membership,
    })
}
