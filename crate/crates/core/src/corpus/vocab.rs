use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Toy vocabulary. The four reserved ids occupy the top of the id range so
/// ordinary content tokens are `0..size - 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
}

pub const RESERVED: usize = 4;

impl Default for Vocab {
    fn default() -> Self {
        Vocab { size: 64 }
    }
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size <= RESERVED {
            return Err(Error::config(format!(
                "vocabulary of {size} leaves no room for content tokens"
            )));
        }
        Ok(Vocab { size })
    }

    pub fn pad(&self) -> TokenId {
        (self.size - 4) as TokenId
    }

    pub fn bos(&self) -> TokenId {
        (self.size - 3) as TokenId
    }

    pub fn eos(&self) -> TokenId {
        (self.size - 2) as TokenId
    }

    pub fn mask(&self) -> TokenId {
        (self.size - 1) as TokenId
    }

    pub fn content_size(&self) -> usize {
        self.size - RESERVED
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id as usize >= self.size - RESERVED
    }

    /// Ids no model may ever emit.
    pub fn banned_outputs(&self) -> [usize; 2] {
        [self.pad() as usize, self.mask() as usize]
    }
}
