use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::Architecture;
use crate::error::{Error, Result};

/// Token id reserved for the `<CLS>` position of encoder inputs.
pub const CLS_TOKEN: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Label is the final content token.
    CopyLastToken,
    /// Label is the sum of content tokens modulo the vocabulary size.
    ModularSum,
    /// Label is the parity (0 or 1) of the number of odd content tokens.
    ParityClassification,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::CopyLastToken => "copy-last-token",
            TaskKind::ModularSum => "modular-sum",
            TaskKind::ParityClassification => "parity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            TaskKind::CopyLastToken,
            TaskKind::ModularSum,
            TaskKind::ParityClassification,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Full input length, including the CLS slot for encoders.
    pub sequence_length: usize,
    pub vocab_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl SyntheticTask {
    /// Draws disjoint train and validation sets. Encoder inputs start with
    /// [`CLS_TOKEN`] and use content tokens `1..vocab`; decoder inputs use the
    /// whole vocabulary.
    pub fn generate(&self, architecture: Architecture) -> Result<TaskData> {
        let encoder = architecture == Architecture::EncoderOnly;
        let content_len = self.sequence_length.saturating_sub(usize::from(encoder));
        if content_len == 0 {
            return Err(Error::Invalid(format!(
                "sequence length {} leaves no content tokens",
                self.sequence_length
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Invalid("vocab_size must be at least 3".into()));
        }
        let low = u32::from(encoder);
        let high = self.vocab_size as u32;
        let wanted = self.train_size + self.val_size;
        let space = ((high - low) as f64).powi(content_len as i32);
        if (wanted as f64) > space / 2.0 {
            return Err(Error::Invalid(format!(
                "{wanted} distinct sequences requested from a space of {space}"
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = HashSet::with_capacity(wanted);
        let mut all = Vec::with_capacity(wanted);
        while all.len() < wanted {
            let content: Vec<u32> = (0..content_len).map(|_| rng.gen_range(low..high)).collect();
            if !seen.insert(content.clone()) {
                continue;
            }
            let label = self.label(&content);
            let mut tokens = Vec::with_capacity(self.sequence_length);
            if encoder {
                tokens.push(CLS_TOKEN);
            }
            tokens.extend(content);
            all.push(Example { tokens, label });
        }
        let val = all.split_off(self.train_size);
        Ok(TaskData { train: all, val })
    }

    fn label(&self, content: &[u32]) -> u32 {
        match self.kind {
            TaskKind::CopyLastToken => *content.last().expect("non-empty content"),
            TaskKind::ModularSum => {
                (content.iter().map(|&t| u64::from(t)).sum::<u64>() % self.vocab_size as u64) as u32
            }
            TaskKind::ParityClassification => {
                content.iter().filter(|&&t| t % 2 == 1).count() as u32 % 2
            }
        }
    }
}
