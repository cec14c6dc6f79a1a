use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{mask_pair, GridPoint};
use crate::nn::{InputImage, Label, TrainingExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    User,
    OpticalFlow,
}

#[derive(Debug, Clone)]
pub struct StoredExample {
    pub example: TrainingExample,
    pub frame: usize,
    pub source: Source,
}

/// Every example that went through a training round, in insertion order.
/// Unmasked (tagged) and masked (clicked) examples live in separate pools,
/// each split by label.
#[derive(Debug, Clone, Default)]
pub struct HistoryDb {
    plain: [Vec<StoredExample>; 2],
    masked: [Vec<StoredExample>; 2],
}

impl HistoryDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, example: TrainingExample, frame: usize, source: Source) {
        let label = example.label.index();
        let pool = if example.mask.is_some() {
            &mut self.masked
        } else {
            &mut self.plain
        };
        pool[label].push(StoredExample {
            example,
            frame,
            source,
        });
    }

    pub fn pool(&self, label: Label, masked: bool) -> &[StoredExample] {
        if masked {
            &self.masked[label.index()]
        } else {
            &self.plain[label.index()]
        }
    }

    pub fn count(&self, label: Label, masked: bool) -> usize {
        self.pool(label, masked).len()
    }

    pub fn len(&self) -> usize {
        self.plain.iter().chain(&self.masked).map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_from(&self, source: Source) -> usize {
        self.plain
            .iter()
            .chain(&self.masked)
            .flatten()
            .filter(|s| s.source == source)
            .count()
    }

    fn draw<R: Rng>(
        &self,
        label: Label,
        masked: bool,
        k: usize,
        rng: &mut R,
    ) -> Vec<TrainingExample> {
        self.pool(label, masked)
            .choose_multiple(rng, k)
            .map(|s| s.example.clone())
            .collect()
    }
}

fn check_batch_size(b: usize) -> Result<()> {
    if b < 2 || b % 2 != 0 {
        return Err(Error::Config(format!(
            "batch size must be even and at least 2, got {b}"
        )));
    }
    Ok(())
}

/// Cuts the larger side down to one more than the smaller.
fn balance(
    mut first: Vec<TrainingExample>,
    mut second: Vec<TrainingExample>,
) -> Vec<TrainingExample> {
    first.truncate(second.len() + 1);
    second.truncate(first.len() + 1);
    first.extend(second);
    first
}

/// The incoming example plus history drawn to fill `b / 2` slots per label,
/// the incoming example taking one slot of its own label. Missing history is
/// not made up by duplication; the larger side is then trimmed so the labels
/// differ by at most one. The incoming example is always first.
pub fn build_batch_semi_online<R: Rng>(
    history: &HistoryDb,
    incoming: &TrainingExample,
    b: usize,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    check_batch_size(b)?;
    let own = incoming.label;
    let other = Label::from_index(1 - own.index());
    let mut same = vec![incoming.clone()];
    same.extend(history.draw(own, false, b / 2 - 1, rng));
    let opposite = history.draw(other, false, b / 2, rng);
    Ok(balance(same, opposite))
}

/// Positive- and negative-masked copies of one clicked image.
pub fn masked_copies(
    image: &InputImage,
    click: GridPoint,
    r: f64,
    side: usize,
) -> Result<[TrainingExample; 2]> {
    let (pos, neg) = mask_pair(click, r, side)?;
    Ok([
        TrainingExample::with_mask(image.clone(), Label::Positive, Arc::new(pos)),
        TrainingExample::with_mask(image.clone(), Label::Negative, Arc::new(neg)),
    ])
}

/// The two masked copies of the incoming image followed by masked history,
/// `(b - 2) / 2` per label, balanced as in [`build_batch_semi_online`].
pub fn build_batch_localized<R: Rng>(
    history: &HistoryDb,
    copies: &[TrainingExample; 2],
    b: usize,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    check_batch_size(b)?;
    let fill = (b - 2) / 2;
    let mut pos = vec![copies[0].clone()];
    pos.extend(history.draw(Label::Positive, true, fill, rng));
    let mut neg = vec![copies[1].clone()];
    neg.extend(history.draw(Label::Negative, true, fill, rng));
    Ok(balance(pos, neg))
}
