//! Destination/source split over the non-special positions.

use alloc::format;
use alloc::vec::Vec;

use crate::rng::SplitMix64;
use crate::tensor::{Matrix, TokenMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PartitionStyle {
    /// Even ordinals are destinations, odd ordinals sources.
    Alternating,
    /// Leading block of destinations, trailing block of sources.
    Sequential,
    /// Seeded uniform shuffle, then a leading block of destinations.
    Random,
    /// Odd ordinals are destinations, even ordinals sources.
    Causal,
}

/// Batch-global index split. Both index lists hold original positions in
/// ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    style: PartitionStyle,
    length: usize,
    l_spec: usize,
    dst_index: Vec<usize>,
    src_index: Vec<usize>,
}

impl PartitionPlan {
    /// Rebuilds a plan from stored index sets, checking disjointness and
    /// coverage of `l_spec..length`.
    pub fn from_indices(
        style: PartitionStyle,
        l_spec: usize,
        dst_index: Vec<usize>,
        src_index: Vec<usize>,
    ) -> Result<Self> {
        let length = l_spec + dst_index.len() + src_index.len();
        let mut seen = alloc::vec![false; length];
        for (name, set) in [("dst_index", &dst_index), ("src_index", &src_index)] {
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::State(format!("{name} must be strictly ascending")));
            }
            for &p in set.iter() {
                if p < l_spec || p >= length {
                    return Err(Error::State(format!(
                        "{name} position {p} outside {l_spec}..{length}"
                    )));
                }
                if seen[p] {
                    return Err(Error::State(format!(
                        "position {p} appears in both dst_index and src_index"
                    )));
                }
                seen[p] = true;
            }
        }
        if dst_index.is_empty() || src_index.is_empty() {
            return Err(Error::State(
                "dst_index and src_index must be non-empty".into(),
            ));
        }
        Ok(Self {
            style,
            length,
            l_spec,
            dst_index,
            src_index,
        })
    }

    pub fn style(&self) -> PartitionStyle {
        self.style
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn l_spec(&self) -> usize {
        self.l_spec
    }

    pub fn dst_index(&self) -> &[usize] {
        &self.dst_index
    }

    pub fn src_index(&self) -> &[usize] {
        &self.src_index
    }

    /// M.
    pub fn num_dst(&self) -> usize {
        self.dst_index.len()
    }

    /// N.
    pub fn num_src(&self) -> usize {
        self.src_index.len()
    }
}

/// Builds the split for a sequence of `length` tokens whose first `l_spec` are
/// special. `ratio_src` only affects the sequential and random styles, and
/// `seed` only the random one.
pub fn make_plan(
    length: usize,
    l_spec: usize,
    style: PartitionStyle,
    ratio_src: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if length < l_spec + 2 {
        return Err(Error::NothingToPartition { length, l_spec });
    }
    let count = length - l_spec;
    let positions = l_spec..length;
    let (mut dst_index, mut src_index): (Vec<usize>, Vec<usize>) = match style {
        PartitionStyle::Alternating => positions.partition(|p| (p - l_spec) % 2 == 0),
        PartitionStyle::Causal => positions.partition(|p| (p - l_spec) % 2 == 1),
        PartitionStyle::Sequential | PartitionStyle::Random => {
            if !(ratio_src > 0.0 && ratio_src < 1.0) {
                return Err(Error::Parameter(format!(
                    "ratio_src {ratio_src} must lie in (0, 1)"
                )));
            }
            let n_dst = dst_count(count, ratio_src);
            let mut order: Vec<usize> = positions.collect();
            if style == PartitionStyle::Random {
                let mut rng = SplitMix64::new(seed);
                for i in (1..order.len()).rev() {
                    let j = rng.below(i + 1);
                    order.swap(i, j);
                }
            }
            let src = order.split_off(n_dst);
            (order, src)
        }
    };
    dst_index.sort_unstable();
    src_index.sort_unstable();
    Ok(PartitionPlan {
        style,
        length,
        l_spec,
        dst_index,
        src_index,
    })
}

/// `ceil((1 - ratio_src) * count)`, kept within `1..count` so both sides are
/// non-empty. A small slack absorbs products like `0.7 * 10 = 7.000000000000001`.
fn dst_count(count: usize, ratio_src: f64) -> usize {
    let raw = libm::ceil((1.0 - ratio_src) * count as f64 - 1e-9) as usize;
    raw.clamp(1, count - 1)
}

/// Per-sample gather of the three index groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitParts {
    pub spec: Vec<Matrix>,
    pub dst: Vec<Matrix>,
    pub src: Vec<Matrix>,
}

/// Gathers special, destination and source rows of every sample, keeping
/// ascending original order inside each group.
pub fn split(t: &TokenMatrix, plan: &PartitionPlan) -> Result<SplitParts> {
    check_plan(t, plan)?;
    let spec_index: Vec<usize> = (0..plan.l_spec).collect();
    let mut parts = SplitParts {
        spec: Vec::with_capacity(t.batch()),
        dst: Vec::with_capacity(t.batch()),
        src: Vec::with_capacity(t.batch()),
    };
    for b in 0..t.batch() {
        let sample = t.sample(b);
        parts.spec.push(sample.select_rows(&spec_index));
        parts.dst.push(sample.select_rows(&plan.dst_index));
        parts.src.push(sample.select_rows(&plan.src_index));
    }
    Ok(parts)
}

pub(crate) fn check_plan(t: &TokenMatrix, plan: &PartitionPlan) -> Result<()> {
    if t.length() != plan.length || t.l_spec() != plan.l_spec {
        return Err(Error::Contract(format!(
            "plan built for length {} / l_spec {} but tensor has length {} / l_spec {}",
            plan.length,
            plan.l_spec,
            t.length(),
            t.l_spec()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const STYLES: [PartitionStyle; 4] = [
        PartitionStyle::Alternating,
        PartitionStyle::Sequential,
        PartitionStyle::Random,
        PartitionStyle::Causal,
    ];

    #[test]
    fn alternating_with_class_token() {
        let p = make_plan(5, 1, PartitionStyle::Alternating, 0.5, 0).unwrap();
        assert_eq!(p.dst_index(), &[1, 3]);
        assert_eq!(p.src_index(), &[2, 4]);
    }

    #[test]
    fn causal_odd_destinations() {
        let p = make_plan(6, 0, PartitionStyle::Causal, 0.5, 0).unwrap();
        assert_eq!(p.dst_index(), &[1, 3, 5]);
        assert_eq!(p.src_index(), &[0, 2, 4]);
    }

    #[test]
    fn sequential_blocks() {
        let p = make_plan(11, 1, PartitionStyle::Sequential, 0.3, 0).unwrap();
        assert_eq!(p.dst_index(), &[1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(p.src_index(), &[8, 9, 10]);
    }

    #[test]
    fn random_is_deterministic() {
        let a = make_plan(4, 0, PartitionStyle::Random, 0.5, 17).unwrap();
        let b = make_plan(4, 0, PartitionStyle::Random, 0.5, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_short() {
        assert_eq!(
            make_plan(3, 2, PartitionStyle::Alternating, 0.5, 0),
            Err(Error::NothingToPartition {
                length: 3,
                l_spec: 2
            })
        );
    }

    #[test]
    fn bad_ratio() {
        assert!(matches!(
            make_plan(8, 0, PartitionStyle::Sequential, 1.0, 0),
            Err(Error::Parameter(_))
        ));
        // ignored by the fixed-parity styles
        assert!(make_plan(8, 0, PartitionStyle::Alternating, 1.0, 0).is_ok());
    }

    #[test]
    fn disjoint_and_covering_exhaustive() {
        for l_spec in 0..=3 {
            for length in (l_spec + 2)..=64 {
                for style in STYLES {
                    for ratio in [0.25, 0.5, 0.75] {
                        let p = make_plan(length, l_spec, style, ratio, length as u64).unwrap();
                        let mut all: Vec<usize> =
                            p.dst_index().iter().chain(p.src_index()).copied().collect();
                        all.sort_unstable();
                        assert_eq!(all, (l_spec..length).collect::<Vec<_>>());
                        assert!(p.num_dst() >= 1 && p.num_src() >= 1);
                    }
                }
            }
        }
    }

    #[test]
    fn random_half_split_is_balanced() {
        for length in 2..100 {
            let p = make_plan(length, 0, PartitionStyle::Random, 0.5, 3).unwrap();
            assert!(p.num_dst().abs_diff(p.num_src()) <= 1);
        }
    }

    #[test]
    fn fixed_styles_ignore_seed() {
        for style in [PartitionStyle::Alternating, PartitionStyle::Causal] {
            assert_eq!(
                make_plan(20, 1, style, 0.5, 1).unwrap(),
                make_plan(20, 1, style, 0.9, 99).unwrap()
            );
        }
    }

    #[test]
    fn split_gathers_rows() {
        let t = TokenMatrix::new(2, 3, 1, 1, vec![10.0, 11.0, 12.0, 20.0, 21.0, 22.0]).unwrap();
        let p = make_plan(3, 1, PartitionStyle::Alternating, 0.5, 0).unwrap();
        let parts = split(&t, &p).unwrap();
        assert_eq!(parts.spec[0].as_slice(), &[10.0]);
        assert_eq!(parts.dst[0].as_slice(), &[11.0]);
        assert_eq!(parts.src[0].as_slice(), &[12.0]);
        assert_eq!(parts.dst[1].as_slice(), &[21.0]);
        assert_eq!(parts.src[1].as_slice(), &[22.0]);
    }

    #[test]
    fn split_rejects_foreign_plan() {
        let t = TokenMatrix::new(1, 4, 1, 0, vec![0.0; 4]).unwrap();
        let p = make_plan(5, 0, PartitionStyle::Alternating, 0.5, 0).unwrap();
        assert!(matches!(split(&t, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn from_indices_validates() {
        assert!(PartitionPlan::from_indices(
            PartitionStyle::Alternating,
            1,
            vec![1, 3],
            vec![2, 4]
        )
        .is_ok());
        assert!(PartitionPlan::from_indices(
            PartitionStyle::Alternating,
            1,
            vec![1, 2],
            vec![2, 4]
        )
        .is_err());
        assert!(PartitionPlan::from_indices(
            PartitionStyle::Alternating,
            0,
            vec![0, 5],
            vec![1, 2]
        )
        .is_err());
    }
}
