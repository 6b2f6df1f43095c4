//! Canonical band registry, named band combinations, SAR log-magnitude and
//! per-band normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BandId {
    B2,
    B3,
    B4,
    B5,
    B6,
    B7,
    B8,
    B8A,
    B11,
    B12,
    VV,
    VH,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Optical,
    Sar,
}

impl BandId {
    /// All canonical bands: the ten Sentinel-2 bands then the two Sentinel-1 polarizations.
    pub const ALL: [BandId; 12] = [
        BandId::B2,
        BandId::B3,
        BandId::B4,
        BandId::B5,
        BandId::B6,
        BandId::B7,
        BandId::B8,
        BandId::B8A,
        BandId::B11,
        BandId::B12,
        BandId::VV,
        BandId::VH,
    ];

    pub fn modality(self) -> Modality {
        match self {
            BandId::VV | BandId::VH => Modality::Sar,
            _ => Modality::Optical,
        }
    }

    /// Row of this band in the channel-embedding table.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&b| b == self).expect("closed set")
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BandId::B2 => "B2",
            BandId::B3 => "B3",
            BandId::B4 => "B4",
            BandId::B5 => "B5",
            BandId::B6 => "B6",
            BandId::B7 => "B7",
            BandId::B8 => "B8",
            BandId::B8A => "B8A",
            BandId::B11 => "B11",
            BandId::B12 => "B12",
            BandId::VV => "VV",
            BandId::VH => "VH",
        }
    }
}

impl fmt::Display for BandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BandId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BandId::ALL
            .iter()
            .copied()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownName {
                kind: "band",
                name: s.to_string(),
            })
    }
}

impl Serialize for BandId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for BandId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A named, ordered, duplicate-free list of bands.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BandCombination {
    name: String,
    bands: Vec<BandId>,
}

const S2_BANDS: [BandId; 10] = [
    BandId::B2,
    BandId::B3,
    BandId::B4,
    BandId::B5,
    BandId::B6,
    BandId::B7,
    BandId::B8,
    BandId::B8A,
    BandId::B11,
    BandId::B12,
];

impl BandCombination {
    pub fn new(name: impl Into<String>, bands: Vec<BandId>) -> Result<Self> {
        let set: BTreeSet<_> = bands.iter().collect();
        if set.len() != bands.len() {
            return Err(Error::Parameter("band combination contains duplicates".into()));
        }
        if bands.is_empty() {
            return Err(Error::Parameter("empty band combination".into()));
        }
        Ok(Self {
            name: name.into(),
            bands,
        })
    }

    pub fn rgb() -> Self {
        Self::named("RGB", vec![BandId::B4, BandId::B3, BandId::B2])
    }

    pub fn s2() -> Self {
        Self::named("S2", S2_BANDS.to_vec())
    }

    pub fn s1() -> Self {
        Self::named("S1", vec![BandId::VV, BandId::VH])
    }

    /// Narrow NIR plus both SWIR bands.
    pub fn nir_swir() -> Self {
        Self::named("NS1S2", vec![BandId::B8A, BandId::B11, BandId::B12])
    }

    pub fn rgbn() -> Self {
        Self::named("RGBN", vec![BandId::B4, BandId::B3, BandId::B2, BandId::B8])
    }

    pub fn s2_s1() -> Self {
        let mut b = S2_BANDS.to_vec();
        b.extend([BandId::VV, BandId::VH]);
        Self::named("S2+S1", b)
    }

    fn named(name: &str, bands: Vec<BandId>) -> Self {
        Self {
            name: name.to_string(),
            bands,
        }
    }

    pub fn all_named() -> Vec<Self> {
        vec![
            Self::rgb(),
            Self::s2(),
            Self::s1(),
            Self::nir_swir(),
            Self::rgbn(),
            Self::s2_s1(),
        ]
    }

    /// Looks up a named combination (`NS1S2`, `N'S1S2` and `S2S1` are accepted
    /// spellings) or parses an explicit `B4+B3+B2`-style list.
    pub fn by_name(name: &str) -> Result<Self> {
        let key = name.trim().to_ascii_uppercase().replace('\'', "");
        let found = match key.as_str() {
            "RGB" => Some(Self::rgb()),
            "S2" => Some(Self::s2()),
            "S1" => Some(Self::s1()),
            "NS1S2" => Some(Self::nir_swir()),
            "RGBN" => Some(Self::rgbn()),
            "S2+S1" | "S2S1" => Some(Self::s2_s1()),
            _ => None,
        };
        if let Some(c) = found {
            return Ok(c);
        }
        let bands = name
            .split('+')
            .map(str::parse)
            .collect::<Result<Vec<BandId>>>()
            .map_err(|_| Error::UnknownName {
                kind: "band combination",
                name: name.to_string(),
            })?;
        Self::new(name, bands)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bands(&self) -> &[BandId] {
        &self.bands
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }
}

impl fmt::Display for BandCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// `10·log10(real² + imag² + 1e-10)`.
pub fn sar_magnitude_db(real: f64, imag: f64) -> f64 {
    10.0 * (real * real + imag * imag + 1e-10).log10()
}

pub const STD_FLOOR: f64 = 1e-8;
pub const CLIP: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-band mean and standard deviation in raw units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizationStats {
    pub bands: BTreeMap<BandId, BandStats>,
}

impl NormalizationStats {
    pub fn get(&self, b: BandId) -> Result<BandStats> {
        self.bands
            .get(&b)
            .copied()
            .ok_or_else(|| Error::Stats(format!("no statistics for band {b}")))
    }

    pub fn validate(&self) -> Result<()> {
        for (b, s) in &self.bands {
            if !(s.std > 0.0) || !s.mean.is_finite() {
                return Err(Error::Stats(format!("band {b} has std {} <= 0", s.std)));
            }
        }
        Ok(())
    }
}

/// `clamp((x − μ)/σ, −3, 3)` for every value of the plane.
pub fn normalize_clip(plane: &[f64], stats: BandStats) -> Result<Vec<f64>> {
    if !(stats.std > 0.0) {
        return Err(Error::Stats(format!("std must be > 0, got {}", stats.std)));
    }
    Ok(plane
        .iter()
        .map(|&x| ((x - stats.mean) / stats.std).clamp(-CLIP, CLIP))
        .collect())
}

/// Mean and (population) standard deviation of each band over every pixel
/// of every plane supplied; σ is floored at [`STD_FLOOR`].
pub fn compute_stats<'a, I>(planes: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = (BandId, &'a [f64])>,
{
    let mut by_band: BTreeMap<BandId, Vec<&'a [f64]>> = BTreeMap::new();
    for (b, plane) in planes {
        by_band.entry(b).or_default().push(plane);
    }
    if by_band.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty split".into()));
    }
    let mut bands = BTreeMap::new();
    for (b, ps) in by_band {
        let n: usize = ps.iter().map(|p| p.len()).sum();
        if n == 0 {
            return Err(Error::Data(format!("band {b} has no pixels")));
        }
        let mean = ps.iter().flat_map(|p| p.iter()).sum::<f64>() / n as f64;
        let var = ps
            .iter()
            .flat_map(|p| p.iter())
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64;
        bands.insert(
            b,
            BandStats {
                mean,
                std: var.sqrt().max(STD_FLOOR),
            },
        );
    }
    Ok(NormalizationStats { bands })
}

/// Channel planes stacked in a fixed band order.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStack {
    pub bands: Vec<BandId>,
    pub height: usize,
    pub width: usize,
    /// `bands.len()` planes of `height·width` values each.
    pub planes: Vec<Vec<f64>>,
}

impl ChannelStack {
    pub fn new(bands: Vec<BandId>, height: usize, width: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        if bands.len() != planes.len() || bands.is_empty() {
            return Err(Error::Shape(format!(
                "{} bands for {} planes",
                bands.len(),
                planes.len()
            )));
        }
        if planes.iter().any(|p| p.len() != height * width) {
            return Err(Error::Shape("plane size does not match height x width".into()));
        }
        Ok(Self {
            bands,
            height,
            width,
            planes,
        })
    }

    pub fn channels(&self) -> usize {
        self.bands.len()
    }

    pub fn plane(&self, b: BandId) -> Option<&[f64]> {
        self.bands
            .iter()
            .position(|&x| x == b)
            .map(|i| self.planes[i].as_slice())
    }

    /// Stacks the combination's bands in combination order.
    pub fn select(&self, combo: &BandCombination) -> Result<ChannelStack> {
        let missing: Vec<String> = combo
            .bands()
            .iter()
            .filter(|b| self.plane(**b).is_none())
            .map(|b| b.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnavailableBand(missing));
        }
        let planes = combo
            .bands()
            .iter()
            .map(|&b| self.plane(b).expect("checked").to_vec())
            .collect();
        ChannelStack::new(combo.bands().to_vec(), self.height, self.width, planes)
    }

    /// Permutes channels; `order[i]` is the source channel of output channel `i`.
    pub fn permuted(&self, order: &[usize]) -> ChannelStack {
        ChannelStack {
            bands: order.iter().map(|&i| self.bands[i]).collect(),
            height: self.height,
            width: self.width,
            planes: order.iter().map(|&i| self.planes[i].clone()).collect(),
        }
    }
}
