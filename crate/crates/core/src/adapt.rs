//! First-layer adaptation of fixed-channel models to a new channel count.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::vit::FixedChannelPatchEmbed;

fn mean_block(blocks: &[Tensor]) -> Tensor {
    let mut acc = Tensor::zeros(blocks[0].shape());
    for b in blocks {
        acc.add_assign(b).expect("blocks share a shape");
    }
    acc.map(|v| v / blocks.len() as f64)
}

/// Averages the blocks into one kernel, replicates it `new_channels` times
/// and divides by `new_channels`.
pub fn adapt_average_replicate(
    embed: &FixedChannelPatchEmbed,
    new_channels: usize,
) -> Result<FixedChannelPatchEmbed> {
    if new_channels < 1 {
        return Err(Error::Parameter("new channel count must be >= 1".into()));
    }
    if embed.blocks.is_empty() {
        return Err(Error::Contract("patch embedding has no blocks".into()));
    }
    let inv = 1.0 / new_channels as f64;
    let block = mean_block(&embed.blocks).map(|v| v * inv);
    Ok(FixedChannelPatchEmbed {
        patch: embed.patch,
        blocks: vec![block; new_channels],
        bias: embed.bias.clone(),
    })
}

/// Keeps the three blocks and appends their mean as the fourth.
pub fn adapt_rgbn_fourth_mean(embed: &FixedChannelPatchEmbed) -> Result<FixedChannelPatchEmbed> {
    if embed.blocks.len() != 3 {
        return Err(Error::Contract(format!(
            "fourth-mean adaptation needs 3 blocks, got {}",
            embed.blocks.len()
        )));
    }
    let mut blocks = embed.blocks.clone();
    blocks.push(mean_block(&embed.blocks));
    Ok(FixedChannelPatchEmbed {
        patch: embed.patch,
        blocks,
        bias: embed.bias.clone(),
    })
}

/// A named first-layer adaptation rule.
pub trait AdaptationStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn adapt(&self, embed: &FixedChannelPatchEmbed, new_channels: usize) -> Result<FixedChannelPatchEmbed>;
}

pub struct AverageReplicate;

impl AdaptationStrategy for AverageReplicate {
    fn name(&self) -> &'static str {
        "average-replicate"
    }

    fn adapt(&self, embed: &FixedChannelPatchEmbed, new_channels: usize) -> Result<FixedChannelPatchEmbed> {
        adapt_average_replicate(embed, new_channels)
    }
}

pub struct FourthMean;

impl AdaptationStrategy for FourthMean {
    fn name(&self) -> &'static str {
        "fourth-mean"
    }

    fn adapt(&self, embed: &FixedChannelPatchEmbed, new_channels: usize) -> Result<FixedChannelPatchEmbed> {
        if new_channels != 4 {
            return Err(Error::Contract(format!(
                "fourth-mean adapts to 4 channels, not {new_channels}"
            )));
        }
        adapt_rgbn_fourth_mean(embed)
    }
}

pub struct AdaptationRegistry {
    entries: BTreeMap<&'static str, Box<dyn AdaptationStrategy>>,
}

impl Default for AdaptationRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register(Box::new(AverageReplicate));
        r.register(Box::new(FourthMean));
        r
    }
}

impl AdaptationRegistry {
    pub fn register(&mut self, s: Box<dyn AdaptationStrategy>) {
        self.entries.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn AdaptationStrategy> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownName {
                kind: "adaptation",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &&'static str> {
        self.entries.keys()
    }
}
