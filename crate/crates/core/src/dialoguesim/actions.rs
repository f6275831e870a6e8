//! Flat indexing of the system action space.
//!
//! Per domain: one request per slot, offer, book. Then reqmore and bye.

use serde::{Deserialize, Serialize};

use super::user::SystemActionKind;
use super::world::Ontology;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    /// First index of each domain's block.
    offsets: Vec<usize>,
    slots: Vec<usize>,
    size: usize,
}

impl ActionSpace {
    pub fn new(onto: &Ontology) -> Self {
        let mut offsets = Vec::with_capacity(onto.num_domains());
        let mut slots = Vec::with_capacity(onto.num_domains());
        let mut next = 0;
        for d in &onto.domains {
            offsets.push(next);
            slots.push(d.slots.len());
            next += d.slots.len() + 2;
        }
        Self {
            offsets,
            slots,
            size: next + 2,
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn index(&self, kind: SystemActionKind) -> Result<usize> {
        let bad = || Error::UnknownSystemAction(format!("{kind:?}"));
        match kind {
            SystemActionKind::Request { domain, slot } => {
                if domain >= self.offsets.len() || slot >= self.slots[domain] {
                    return Err(bad());
                }
                Ok(self.offsets[domain] + slot)
            }
            SystemActionKind::Offer { domain } => {
                let off = *self.offsets.get(domain).ok_or_else(bad)?;
                Ok(off + self.slots[domain])
            }
            SystemActionKind::Book { domain } => {
                let off = *self.offsets.get(domain).ok_or_else(bad)?;
                Ok(off + self.slots[domain] + 1)
            }
            SystemActionKind::Reqmore => Ok(self.size - 2),
            SystemActionKind::Bye => Ok(self.size - 1),
        }
    }

    pub fn kind(&self, index: usize) -> Result<SystemActionKind> {
        if index >= self.size {
            return Err(Error::UnknownSystemAction(format!("action index {index}")));
        }
        if index == self.size - 2 {
            return Ok(SystemActionKind::Reqmore);
        }
        if index == self.size - 1 {
            return Ok(SystemActionKind::Bye);
        }
        let domain = self
            .offsets
            .iter()
            .rposition(|&o| o <= index)
            .expect("offset 0 exists");
        let local = index - self.offsets[domain];
        let s = self.slots[domain];
        Ok(if local < s {
            SystemActionKind::Request {
                domain,
                slot: local,
            }
        } else if local == s {
            SystemActionKind::Offer { domain }
        } else {
            SystemActionKind::Book { domain }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialoguesim::world::{build_world, WorldConfig};

    #[test]
    fn round_trip_and_size() {
        let w = build_world(&WorldConfig::default(), 0).unwrap();
        let a = ActionSpace::new(&w.ontology);
        assert_eq!(a.len(), 12);
        for i in 0..a.len() {
            assert_eq!(a.index(a.kind(i).unwrap()).unwrap(), i);
        }
        assert_eq!(a.kind(3).unwrap(), SystemActionKind::Offer { domain: 0 });
        assert_eq!(
            a.kind(5).unwrap(),
            SystemActionKind::Request { domain: 1, slot: 0 }
        );
        assert!(a.kind(12).is_err());
        assert!(a
            .index(SystemActionKind::Request { domain: 0, slot: 3 })
            .is_err());
    }
}
