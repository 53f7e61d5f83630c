use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::toyvlm::ToyVlmConfig;

pub const YES: usize = 0;
pub const NO: usize = 1;
/// First of four consecutive answer-choice tokens.
pub const CHOICE_BASE: usize = 2;
pub const N_CHOICES: usize = 4;
pub const ROBUSTNESS_MARKER: usize = 6;
pub const UTILITY_MARKER: usize = 7;
/// Tokens from here up are image/content tokens.
pub const FIRST_CONTENT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Robustness,
    Utility,
}

/// One scored question: the answer is read from the logits at
/// `answer_position`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeInstance {
    pub tokens: Vec<usize>,
    pub answer_position: usize,
    pub gt_tokens: Vec<usize>,
    pub neg_tokens: Vec<usize>,
    pub task_tag: TaskTag,
}

impl ProbeInstance {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        check_sets(&self.gt_tokens, &self.neg_tokens, vocab_size)?;
        if self.answer_position >= self.tokens.len() {
            bail!(
                Usage,
                "answer position {} outside probe of {} tokens",
                self.answer_position,
                self.tokens.len()
            );
        }
        Ok(())
    }

    /// The single correct token, used as the class label.
    pub fn label(&self) -> usize {
        self.gt_tokens[0]
    }
}

pub(crate) fn check_sets(gt: &[usize], neg: &[usize], vocab_size: usize) -> Result<()> {
    if gt.is_empty() || neg.is_empty() {
        bail!(Usage, "answer token sets must be non-empty");
    }
    if gt.iter().any(|t| neg.contains(t)) {
        bail!(Usage, "answer token sets overlap: {:?} / {:?}", gt, neg);
    }
    if let Some(t) = gt.iter().chain(neg).find(|&&t| t >= vocab_size) {
        bail!(Usage, "answer token {} outside vocabulary of {}", t, vocab_size);
    }
    Ok(())
}

/// Labelled probes for both objectives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub instances: Vec<ProbeInstance>,
}

impl ProbeSet {
    /// Object-presence yes/no probes (balanced) and 4-way choice probes
    /// whose answer is the sum of the image tokens modulo 4.
    pub fn synthetic(cfg: &ToyVlmConfig, n_robustness: usize, n_utility: usize, seed: u64) -> Result<Self> {
        let n_vis = cfg.n_vision_tokens;
        let n_content = cfg.vocab_size.saturating_sub(FIRST_CONTENT);
        if n_content <= n_vis {
            bail!(
                Config,
                "probes need more than {} content tokens, vocabulary leaves {}",
                n_vis,
                n_content
            );
        }
        if cfg.max_seq < n_vis + 2 {
            bail!(Config, "probes need at least two language positions");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let content: Vec<usize> = (FIRST_CONTENT..cfg.vocab_size).collect();
        let len = cfg.max_seq;
        let answer_position = len - 1;
        let mut instances = Vec::with_capacity(n_robustness + n_utility);

        let image = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            (0..n_vis).map(|_| *content.choose(rng).unwrap()).collect()
        };
        let fillers = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
            (0..n).map(|_| *content.choose(rng).unwrap()).collect()
        };

        for i in 0..n_robustness {
            let vision = image(&mut rng);
            let present = i % 2 == 0;
            let query = if present {
                vision[rng.random_range(0..n_vis)]
            } else {
                let absent: Vec<usize> = content.iter().copied().filter(|t| !vision.contains(t)).collect();
                *absent.choose(&mut rng).unwrap()
            };
            let mut tokens = vision;
            tokens.push(ROBUSTNESS_MARKER);
            tokens.extend(fillers(&mut rng, len - n_vis - 2));
            tokens.push(query);
            let (gt, neg) = if present { (YES, NO) } else { (NO, YES) };
            instances.push(ProbeInstance {
                tokens,
                answer_position,
                gt_tokens: alloc::vec![gt],
                neg_tokens: alloc::vec![neg],
                task_tag: TaskTag::Robustness,
            });
        }
        for _ in 0..n_utility {
            let vision = image(&mut rng);
            let correct = vision.iter().sum::<usize>() % N_CHOICES;
            let mut tokens = vision;
            tokens.push(UTILITY_MARKER);
            tokens.extend(fillers(&mut rng, len - n_vis - 1));
            instances.push(ProbeInstance {
                tokens,
                answer_position,
                gt_tokens: alloc::vec![CHOICE_BASE + correct],
                neg_tokens: (0..N_CHOICES)
                    .filter(|&c| c != correct)
                    .map(|c| CHOICE_BASE + c)
                    .collect(),
                task_tag: TaskTag::Utility,
            });
        }
        Ok(Self { instances })
    }

    pub fn validate(&self, cfg: &ToyVlmConfig) -> Result<()> {
        for p in &self.instances {
            p.validate(cfg.vocab_size)?;
            crate::toyvlm::check_tokens(cfg, &p.tokens)?;
        }
        Ok(())
    }

    pub fn by_task(&self, tag: TaskTag) -> impl Iterator<Item = &ProbeInstance> {
        self.instances.iter().filter(move |p| p.task_tag == tag)
    }

    pub fn count(&self, tag: TaskTag) -> usize {
        self.by_task(tag).count()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}
