use alloc::vec::Vec;

use crate::data::image::RgbImage;
use crate::data::synthetic::SyntheticCorpus;
use crate::data::tokenizer::Tokenizer;
use crate::data::ImageTextPair;
use crate::error::{bail, Result};

/// Random-access view of a training set.
pub trait ExampleSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn pair_id(&self, index: usize) -> u64;

    /// Fixed-length token ids of the caption.
    fn tokens(&self, index: usize) -> Result<Vec<u32>>;

    fn image(&self, index: usize) -> Result<RgbImage>;
}

/// A subset of a synthetic corpus, tokenized on the fly.
pub struct SyntheticSource<'a> {
    corpus: &'a SyntheticCorpus,
    tokenizer: &'a Tokenizer,
    indices: Vec<usize>,
}

impl<'a> SyntheticSource<'a> {
    pub fn new(corpus: &'a SyntheticCorpus, tokenizer: &'a Tokenizer, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= corpus.len()) {
            bail!(Validation, "index {} is outside the corpus of {}", bad, corpus.len());
        }
        Ok(SyntheticSource { corpus, tokenizer, indices })
    }

    pub fn full(corpus: &'a SyntheticCorpus, tokenizer: &'a Tokenizer) -> Self {
        SyntheticSource { corpus, tokenizer, indices: (0..corpus.len()).collect() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl ExampleSource for SyntheticSource<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn pair_id(&self, index: usize) -> u64 {
        self.indices[index] as u64
    }

    fn tokens(&self, index: usize) -> Result<Vec<u32>> {
        Ok(self.tokenizer.tokenize(&self.corpus.caption(self.indices[index])))
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        Ok(self.corpus.pair(self.indices[index]).image)
    }
}

/// Pairs held in memory, tokenized with `tokenizer`.
pub struct PairSource<'a> {
    pairs: &'a [ImageTextPair],
    tokenizer: &'a Tokenizer,
}

impl<'a> PairSource<'a> {
    pub fn new(pairs: &'a [ImageTextPair], tokenizer: &'a Tokenizer) -> Self {
        PairSource { pairs, tokenizer }
    }
}

impl ExampleSource for PairSource<'_> {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn pair_id(&self, index: usize) -> u64 {
        self.pairs[index].pair_id
    }

    fn tokens(&self, index: usize) -> Result<Vec<u32>> {
        Ok(self.tokenizer.tokenize(&self.pairs[index].caption))
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        Ok(self.pairs[index].image.clone())
    }
}
