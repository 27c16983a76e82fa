use serde::{Deserialize, Serialize};

use crate::data::UNKNOWN_LABEL;
use crate::error::{Error, Result};
use crate::matching::class_column;

/// Known classes `K^t` in classifier-column order (column `i + 1` is `known[i]`).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    known: Vec<u32>,
    /// Completed oracle steps.
    task: usize,
    /// Classes added at each step, in order.
    history: Vec<Vec<u32>>,
}

impl LabelSpace {
    pub fn new(first: &[u32]) -> Result<Self> {
        let mut s = LabelSpace::default();
        s.add(first)?;
        s.task = 0;
        Ok(s)
    }

    pub fn known(&self) -> &[u32] {
        &self.known
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn history(&self) -> &[Vec<u32>] {
        &self.history
    }

    /// Classifier width `1 + |K|`.
    pub fn width(&self) -> usize {
        1 + self.known.len()
    }

    pub fn contains(&self, label: u32) -> bool {
        self.known.contains(&label)
    }

    pub fn column(&self, label: u32) -> Option<usize> {
        class_column(&self.known, label)
    }

    /// Class id of classifier column `col` (0 is unknown).
    pub fn label_of(&self, col: usize) -> u32 {
        if col == 0 {
            UNKNOWN_LABEL
        } else {
            self.known[col - 1]
        }
    }

    /// `K^{t+1} = K^t + new`.
    pub fn add(&mut self, new: &[u32]) -> Result<()> {
        for (i, &c) in new.iter().enumerate() {
            if c == UNKNOWN_LABEL {
                return Err(Error::contract("label 0 is reserved for unknown"));
            }
            if self.known.contains(&c) || new[..i].contains(&c) {
                return Err(Error::contract(format!("class {c} is already known")));
            }
        }
        self.known.extend_from_slice(new);
        self.history.push(new.to_vec());
        self.task += 1;
        Ok(())
    }
}
