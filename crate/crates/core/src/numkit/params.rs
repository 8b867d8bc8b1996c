//! Flat parameter vector with named blocks.

use crate::error::{Error, Result};
use crate::numkit::mat::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Unconstrained trainable scalars. Blocks are disjoint and laid out
/// back to back, so their concatenation is the whole vector. Positive
/// quantities are registered by their logarithm.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    blocks: Vec<Block>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block holding `value` (shape preserved).
    pub fn register(&mut self, name: &str, value: &Mat, trainable: bool) -> Result<()> {
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::Config(format!("parameter block `{name}` registered twice")));
        }
        self.blocks.push(Block {
            name: name.to_string(),
            offset: self.values.len(),
            rows: value.rows(),
            cols: value.cols(),
            trainable,
        });
        self.values.extend_from_slice(value.as_slice());
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.block(name).map(|b| &self.values[b.range()])
    }

    /// Block as a matrix of its registered shape.
    pub fn mat(&self, name: &str) -> Option<Mat> {
        let b = self.block(name)?;
        Mat::from_vec(b.rows, b.cols, self.values[b.range()].to_vec()).ok()
    }

    pub fn set(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let b = self
            .block(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter block `{name}`")))?
            .clone();
        if data.len() != b.len() {
            return Err(Error::dims("ParamVector::set", b.len(), data.len()));
        }
        self.values[b.range()].copy_from_slice(data);
        Ok(())
    }

    /// Mask with `true` for entries in trainable blocks.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for b in &self.blocks {
            mask[b.range()].fill(b.trainable);
        }
        mask
    }

    /// Name of the block that owns flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&str> {
        self.blocks
            .iter()
            .find(|b| b.range().contains(&i))
            .map(|b| b.name.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_are_disjoint_and_cover() {
        let mut p = ParamVector::new();
        p.register("z", &Mat::zeros(3, 2), true).unwrap();
        p.register("log_amp", &Mat::scalar(0.5), false).unwrap();
        p.register("a", &Mat::row_vec(&[1.0, 2.0, 3.0]), true).unwrap();
        let total: usize = p.blocks().iter().map(Block::len).sum();
        assert_eq!(total, p.len());
        for w in p.blocks().windows(2) {
            assert_eq!(w[0].offset + w[0].len(), w[1].offset);
        }
        assert_eq!(p.get("a").unwrap(), &[1.0, 2.0, 3.0]);
        assert_eq!(p.owner(6), Some("log_amp"));
        assert_eq!(p.trainable_mask().iter().filter(|&&m| m).count(), 9);
        assert!(p.register("a", &Mat::scalar(0.0), true).is_err());
    }
}
