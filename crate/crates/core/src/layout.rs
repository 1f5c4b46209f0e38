//! Channel-interleaving plans for hybrid spatio-temporal kernels.
//!
//! A layer with temporal proportion `p = 1/G` has `G` kernel types. Type `g`
//! applies temporal kernels to input channels `[g·pC_i, (g+1)·pC_i)` and
//! spatial kernels to every other input channel; output channels are
//! assigned to types in contiguous blocks of `C_o/G`.

use crate::error::{Error, Result};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

/// Temporal proportion as a reduced fraction `num/den`, with `num ∈ {0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Proportion {
    num: usize,
    den: usize,
}

impl Proportion {
    pub const ZERO: Proportion = Proportion { num: 0, den: 1 };
    pub const ONE: Proportion = Proportion { num: 1, den: 1 };

    /// `p = 1/groups`.
    pub fn one_over(groups: usize) -> Result<Self> {
        if groups == 0 {
            return Err(Error::InvalidArgument("proportion 1/0".into()));
        }
        Ok(Proportion { num: 1, den: groups })
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    /// Number of kernel types `G`; 1 when `p = 0`.
    pub fn groups(&self) -> usize {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn numer(&self) -> usize {
        self.num
    }

    pub fn denom(&self) -> usize {
        self.den
    }
}

impl fmt::Display for Proportion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.num, self.den) {
            (0, _) => write!(f, "0"),
            (n, 1) => write!(f, "{n}"),
            (n, d) => write!(f, "{n}/{d}"),
        }
    }
}

impl FromStr for Proportion {
    type Err = Error;

    /// Accepts `0`, `1`, `1/G`, or a decimal equal to one of those.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("proportion {s:?} is not 0 or 1/G"));
        let (num, den) = if let Some((a, b)) = s.split_once('/') {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            (a, b)
        } else if let Ok(v) = s.parse::<usize>() {
            (v, 1)
        } else {
            let v: f64 = s.parse().map_err(|_| bad())?;
            if v == 0.0 {
                (0, 1)
            } else {
                let g = (1.0 / v).round();
                if !(g >= 1.0) || (1.0 / g - v).abs() > 1e-12 {
                    return Err(bad());
                }
                (1, g as usize)
            }
        };
        if den == 0 {
            return Err(bad());
        }
        match num {
            0 => Ok(Proportion::ZERO),
            n if den % n == 0 => Ok(Proportion { num: 1, den: den / n }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// temporal span shifted per kernel type
    Hybrid,
    /// one temporal span `[0, pC_i)` shared by every output channel
    Merge,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hybrid" => Ok(Variant::Hybrid),
            "merge" => Ok(Variant::Merge),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Hybrid => "hybrid",
            Variant::Merge => "merge",
        })
    }
}

/// One group of output channels sharing a temporal input span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub out: Range<usize>,
    pub temporal: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridLayout {
    pub c_in: usize,
    pub c_out: usize,
    pub p: Proportion,
    pub variant: Variant,
    /// `G = 1/p` (1 when `p = 0`).
    pub groups: usize,
    /// `p · C_i` (0 when `p = 0`).
    pub span_width: usize,
}

/// Hybrid layout for `p ∈ {0} ∪ {1/G : G ≥ 2}`. `p = 1` needs [`build_layout_with`].
pub fn build_layout(c_in: usize, c_out: usize, p: Proportion) -> Result<HybridLayout> {
    build_layout_with(c_in, c_out, p, Variant::Hybrid, false)
}

pub fn build_merge_layout(c_in: usize, c_out: usize, p: Proportion) -> Result<HybridLayout> {
    build_layout_with(c_in, c_out, p, Variant::Merge, false)
}

pub fn build_layout_with(
    c_in: usize,
    c_out: usize,
    p: Proportion,
    variant: Variant,
    allow_full_temporal: bool,
) -> Result<HybridLayout> {
    if c_in == 0 || c_out == 0 {
        return Err(Error::Layout(format!("channels must be positive, got {c_in} -> {c_out}")));
    }
    if p == Proportion::ONE && !allow_full_temporal {
        return Err(Error::Layout("p = 1 (all-temporal kernels) is not enabled".into()));
    }
    if p.is_zero() {
        return Ok(HybridLayout { c_in, c_out, p, variant, groups: 1, span_width: 0 });
    }
    let groups = p.groups();
    if c_in % groups != 0 {
        return Err(Error::Layout(format!("p·C_i = {c_in}/{groups} is not an integer")));
    }
    if variant == Variant::Hybrid && c_out % groups != 0 {
        return Err(Error::Layout(format!(
            "C_o = {c_out} not divisible by the {groups} kernel types"
        )));
    }
    Ok(HybridLayout { c_in, c_out, p, variant, groups, span_width: c_in / groups })
}

impl HybridLayout {
    /// Kernel type of output channel `m`.
    pub fn type_of_output_channel(&self, m: usize) -> usize {
        match self.variant {
            Variant::Merge => 0,
            Variant::Hybrid => m / (self.c_out / self.groups),
        }
    }

    /// Input channels processed temporally by kernel type `g`.
    pub fn temporal_span(&self, g: usize) -> Range<usize> {
        g * self.span_width..(g + 1) * self.span_width
    }

    pub fn is_temporal(&self, m: usize, c: usize) -> bool {
        self.temporal_span(self.type_of_output_channel(m)).contains(&c)
    }

    /// Output-channel blocks in order; every output channel is in exactly one.
    pub fn blocks(&self) -> Vec<Block> {
        match self.variant {
            Variant::Merge => vec![Block { out: 0..self.c_out, temporal: self.temporal_span(0) }],
            Variant::Hybrid => {
                let per = self.c_out / self.groups;
                (0..self.groups)
                    .map(|g| Block { out: g * per..(g + 1) * per, temporal: self.temporal_span(g) })
                    .collect()
            }
        }
    }

    /// Live scalars per output channel for a `kt` temporal / `kh × kw` spatial kernel.
    pub fn live_per_output(&self, kt: usize, kh: usize, kw: usize) -> usize {
        self.span_width * kt + (self.c_in - self.span_width) * kh * kw
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_channels_quarter_gives_four_types() {
        let l = build_layout(8, 8, "1/4".parse().unwrap()).unwrap();
        assert_eq!(l.groups, 4);
        let spans: Vec<_> = (0..4).map(|g| l.temporal_span(g)).collect();
        assert_eq!(spans, vec![0..2, 2..4, 4..6, 6..8]);
    }

    #[test]
    fn sixty_four_channels_tile() {
        let l = build_layout(64, 64, Proportion::one_over(4).unwrap()).unwrap();
        let mut owned = vec![0; 4];
        for m in 0..64 {
            owned[l.type_of_output_channel(m)] += 1;
        }
        assert_eq!(owned, vec![16; 4]);
        let mut covered = vec![0; 64];
        for g in 0..4 {
            for c in l.temporal_span(g) {
                covered[c] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn full_temporal_needs_opt_in() {
        assert!(matches!(build_layout(4, 4, Proportion::ONE), Err(Error::Layout(_))));
        let l = build_layout_with(4, 4, Proportion::ONE, Variant::Hybrid, true).unwrap();
        assert_eq!(l.groups, 1);
        assert!((0..4).all(|m| (0..4).all(|c| l.is_temporal(m, c))));
    }

    #[test]
    fn divisibility_errors() {
        assert!(build_layout(6, 8, Proportion::one_over(4).unwrap()).is_err());
        assert!(build_layout(8, 6, Proportion::one_over(4).unwrap()).is_err());
        // merge only needs p·C_i integral
        assert!(build_merge_layout(8, 6, Proportion::one_over(4).unwrap()).is_ok());
    }

    #[test]
    fn proportion_parsing() {
        assert_eq!("1/8".parse::<Proportion>().unwrap(), Proportion::one_over(8).unwrap());
        assert_eq!("0.25".parse::<Proportion>().unwrap(), Proportion::one_over(4).unwrap());
        assert_eq!("2/8".parse::<Proportion>().unwrap(), Proportion::one_over(4).unwrap());
        assert_eq!("0".parse::<Proportion>().unwrap(), Proportion::ZERO);
        assert!("3/8".parse::<Proportion>().is_err());
        assert!("0.3".parse::<Proportion>().is_err());
        assert_eq!(Proportion::one_over(4).unwrap().to_string(), "1/4");
    }
}
