//! Axis-aligned boxes: construction from latent parameters, center/offset
//! form, element-wise distance, intersection, and hard and
//! softplus-smoothed (Gumbel) volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(softplus(x))`, accurate for very negative `x` where softplus
/// underflows.
pub fn log_softplus(x: f64) -> f64 {
    if x > -30.0 {
        softplus(x).ln()
    } else {
        x + (-0.5 * x.exp()).ln_1p()
    }
}

/// Derivative of [`log_softplus`].
pub fn log_softplus_grad(x: f64) -> f64 {
    if x > -30.0 {
        sigmoid(x) / softplus(x)
    } else {
        1.0 - 0.5 * x.exp()
    }
}

/// Latent box parameters: lower corners and pre-softplus widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLatent {
    pub theta_z: Vec<f64>,
    pub theta_w: Vec<f64>,
}

impl BoxLatent {
    pub fn new(theta_z: Vec<f64>, theta_w: Vec<f64>) -> Result<Self> {
        if theta_z.len() != theta_w.len() || theta_z.is_empty() {
            return Err(Error::shape(format!(
                "latent halves must have equal non-zero length ({} vs {})",
                theta_z.len(),
                theta_w.len()
            )));
        }
        if theta_z.iter().chain(&theta_w).any(|v| !v.is_finite()) {
            return Err(Error::data("box latent has non-finite entries"));
        }
        Ok(BoxLatent { theta_z, theta_w })
    }

    /// Splits a concatenated latent vector: first half lower corners,
    /// second half width parameters.
    pub fn from_concat(latent: &[f64]) -> Result<Self> {
        if !latent.len().is_multiple_of(2) {
            return Err(Error::shape(format!(
                "box latent must have even length, got {}",
                latent.len()
            )));
        }
        let n = latent.len() / 2;
        BoxLatent::new(latent[..n].to_vec(), latent[n..].to_vec())
    }

    pub fn dim(&self) -> usize {
        self.theta_z.len()
    }
}

/// Closed box `∏ [lower_i, upper_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Result of intersecting two boxes.
#[derive(Clone, Debug, PartialEq)]
pub enum Intersection {
    Box(AxisBox),
    Empty,
}

impl Intersection {
    pub fn is_empty(&self) -> bool {
        matches!(self, Intersection::Empty)
    }
}

impl AxisBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::shape(format!(
                "box corners differ in length ({} vs {})",
                lower.len(),
                upper.len()
            )));
        }
        Ok(AxisBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn sides(&self) -> impl Iterator<Item = f64> + '_ {
        self.lower.iter().zip(&self.upper).map(|(z, big)| big - z)
    }

    /// Corner-wise containment `self ⊆ other`.
    pub fn is_contained_in(&self, other: &AxisBox) -> bool {
        self.dim() == other.dim()
            && (0..self.dim())
                .all(|i| other.lower[i] <= self.lower[i] && self.upper[i] <= other.upper[i])
    }
}

/// `z = θ^z`, `Z = z + softplus(θ^w)`. A width that rounds away is bumped to
/// one ulp so the box stays non-degenerate.
pub fn make_box(latent: &BoxLatent) -> AxisBox {
    let upper = latent
        .theta_z
        .iter()
        .zip(&latent.theta_w)
        .map(|(z, w)| (z + softplus(*w)).max(z.next_up()))
        .collect();
    AxisBox {
        lower: latent.theta_z.clone(),
        upper,
    }
}

/// `(c, o)` with `c = (z + Z) / 2` and `o = Z - c`.
pub fn center_offset(b: &AxisBox) -> (Vec<f64>, Vec<f64>) {
    b.lower
        .iter()
        .zip(&b.upper)
        .map(|(z, big)| {
            let c = (z + big) / 2.0;
            (c, big - c)
        })
        .unzip()
}

fn check_dims(a: &AxisBox, b: &AxisBox) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "boxes have different dimensionality ({} vs {})",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Element-wise distance `|c^C - c^D| - o^C - o^D`. Negative entries mark
/// overlapping dimensions.
pub fn box_distance(c_box: &AxisBox, d_box: &AxisBox) -> Result<Vec<f64>> {
    check_dims(c_box, d_box)?;
    let (cc, oc) = center_offset(c_box);
    let (cd, od) = center_offset(d_box);
    Ok((0..cc.len())
        .map(|i| (cc[i] - cd[i]).abs() - (oc[i] + od[i]))
        .collect())
}

/// Corners `(max z, min Z)` of the intersection, without the emptiness
/// check. Used where a smoothed volume is taken of a possibly inverted box.
pub fn intersection_corners(a: &AxisBox, b: &AxisBox) -> Result<AxisBox> {
    check_dims(a, b)?;
    Ok(AxisBox {
        lower: a.lower.iter().zip(&b.lower).map(|(x, y)| x.max(*y)).collect(),
        upper: a.upper.iter().zip(&b.upper).map(|(x, y)| x.min(*y)).collect(),
    })
}

pub fn intersect(a: &AxisBox, b: &AxisBox) -> Result<Intersection> {
    let corners = intersection_corners(a, b)?;
    if corners.sides().any(|s| s <= 0.0) {
        Ok(Intersection::Empty)
    } else {
        Ok(Intersection::Box(corners))
    }
}

pub fn hard_volume(b: &Intersection) -> f64 {
    match b {
        Intersection::Empty => 0.0,
        Intersection::Box(b) => b.sides().map(|s| s.max(0.0)).product(),
    }
}

/// Smoothing temperature for softplus volumes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GumbelTemp(f64);

impl GumbelTemp {
    pub const DEFAULT: GumbelTemp = GumbelTemp(0.25);

    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::config("gumbel_temp", format!("must be > 0, got {beta}")));
        }
        Ok(GumbelTemp(beta))
    }

    pub fn beta(self) -> f64 {
        self.0
    }
}

impl Default for GumbelTemp {
    fn default() -> Self {
        GumbelTemp::DEFAULT
    }
}

/// `∏ β·softplus(side/β)`; strictly positive and finite even for inverted
/// boxes.
pub fn gumbel_volume(b: &AxisBox, t: GumbelTemp) -> f64 {
    gumbel_log_volume(b, t).exp()
}

pub fn gumbel_log_volume(b: &AxisBox, t: GumbelTemp) -> f64 {
    let beta = t.beta();
    b.sides().map(|s| beta.ln() + log_softplus(s / beta)).sum()
}

/// Box export line: `class<TAB>domain<TAB>layer<TAB>z_1,…<TAB>Z_1,…`.
pub fn format_box_line(class: &str, domain: &str, layer: usize, b: &AxisBox) -> String {
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.16e}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    format!("{class}\t{domain}\t{layer}\t{}\t{}", join(&b.lower), join(&b.upper))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxRecord {
    pub class: String,
    pub domain: String,
    pub layer: usize,
    pub b: AxisBox,
}

pub fn parse_box_line(line: &str) -> Result<BoxRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(Error::data(format!("box line needs 5 fields: {line}")));
    }
    let nums = |s: &str| -> Result<Vec<f64>> {
        s.split(',')
            .map(|x| {
                x.parse::<f64>()
                    .map_err(|_| Error::data(format!("bad coordinate `{x}`")))
            })
            .collect()
    };
    Ok(BoxRecord {
        class: fields[0].to_string(),
        domain: fields[1].to_string(),
        layer: fields[2]
            .parse()
            .map_err(|_| Error::data(format!("bad layer `{}`", fields[2])))?,
        b: AxisBox::new(nums(fields[3])?, nums(fields[4])?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b1(z: f64, big: f64) -> AxisBox {
        AxisBox::new(vec![z], vec![big]).unwrap()
    }

    #[test]
    fn make_box_examples() {
        let b = make_box(&BoxLatent::new(vec![0.0], vec![0.0]).unwrap());
        assert_eq!(b.lower, vec![0.0]);
        assert!((b.upper[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let b = make_box(&BoxLatent::new(vec![1.5], vec![-50.0]).unwrap());
        assert!(b.upper[0] - b.lower[0] > 0.0);

        let b = make_box(&BoxLatent::new(vec![-1.0], vec![10.0]).unwrap());
        assert!((b.upper[0] - 9.000_045_398_899_218).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((log_softplus(-40.0) - (-40.0)).abs() < 1e-15);
        assert!((log_softplus(-29.0) - softplus(-29.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn center_offset_examples() {
        assert_eq!(center_offset(&b1(0.0, 2.0)), (vec![1.0], vec![1.0]));
        assert_eq!(center_offset(&b1(-3.0, -1.0)), (vec![-2.0], vec![1.0]));
        let (_, o) = center_offset(&b1(0.5, 0.5 + 2.0 * 0.75));
        assert_eq!(o, vec![0.75]);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(box_distance(&b1(0.0, 2.0), &b1(1.0, 5.0)).unwrap(), vec![-1.0]);
        assert_eq!(box_distance(&b1(0.0, 2.0), &b1(0.0, 2.0)).unwrap(), vec![-2.0]);
        assert_eq!(box_distance(&b1(0.0, 1.0), &b1(3.0, 4.0)).unwrap(), vec![2.0]);
        let two = AxisBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(box_distance(&two, &b1(0.0, 1.0)).is_err());
    }

    #[test]
    fn intersection_examples() {
        assert_eq!(
            intersect(&b1(0.0, 2.0), &b1(1.0, 5.0)).unwrap(),
            Intersection::Box(b1(1.0, 2.0))
        );
        let a = AxisBox::new(vec![0.0, 1.0], vec![3.0, 2.0]).unwrap();
        assert_eq!(intersect(&a, &a).unwrap(), Intersection::Box(a.clone()));
        assert!(intersect(&b1(0.0, 1.0), &b1(3.0, 4.0)).unwrap().is_empty());
        // touching faces have zero measure
        assert!(intersect(&b1(0.0, 1.0), &b1(1.0, 4.0)).unwrap().is_empty());
    }

    #[test]
    fn volume_examples() {
        let b = AxisBox::new(vec![0.0, 0.0], vec![2.0, 3.0]).unwrap();
        assert_eq!(hard_volume(&Intersection::Box(b)), 6.0);
        assert_eq!(hard_volume(&Intersection::Empty), 0.0);
        let unit = AxisBox::new(vec![0.0; 7], vec![1.0; 7]).unwrap();
        assert_eq!(hard_volume(&Intersection::Box(unit)), 1.0);

        let t = GumbelTemp::new(0.25).unwrap();
        assert!((gumbel_volume(&b1(0.0, 2.0), t) - 2.000_083_851_593_224).abs() < 1e-12);
        assert!((gumbel_volume(&b1(1.0, 1.0), t) - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);

        let mut prev = f64::INFINITY;
        for beta in [0.25, 0.025, 0.0025] {
            let err = (gumbel_volume(&b1(0.0, 1.0), GumbelTemp::new(beta).unwrap()) - 1.0).abs();
            assert!(err <= prev);
            prev = err;
        }
        assert!(prev < 1e-12);
        assert!(GumbelTemp::new(0.0).is_err());
    }

    #[test]
    fn export_line_round_trips() {
        let b = AxisBox::new(vec![0.1, -1.0 / 3.0], vec![0.7, 1e-300]).unwrap();
        let line = format_box_line("GO_1", "mf", 2, &b);
        let rec = parse_box_line(&line).unwrap();
        assert_eq!(rec.b, b);
        assert_eq!((rec.class.as_str(), rec.domain.as_str(), rec.layer), ("GO_1", "mf", 2));
    }

    fn arb_box(dim: usize) -> impl Strategy<Value = AxisBox> {
        (
            proptest::collection::vec(-5.0f64..5.0, dim),
            proptest::collection::vec(0.01f64..4.0, dim),
        )
            .prop_map(|(z, s)| {
                let upper = z.iter().zip(&s).map(|(a, b)| a + b).collect();
                AxisBox::new(z, upper).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn make_box_is_strictly_ordered(
            z in proptest::collection::vec(-100.0f64..100.0, 1..6),
            w in proptest::collection::vec(-100.0f64..100.0, 6),
        ) {
            let w = w[..z.len()].to_vec();
            let b = make_box(&BoxLatent::new(z, w).unwrap());
            for (lo, hi) in b.lower.iter().zip(&b.upper) {
                prop_assert!(hi > lo);
            }
        }

        #[test]
        fn distance_symmetric_and_matches_overlap(a in arb_box(3), b in arb_box(3)) {
            let dab = box_distance(&a, &b).unwrap();
            let dba = box_distance(&b, &a).unwrap();
            prop_assert_eq!(&dab, &dba);
            for (i, d) in dab.iter().enumerate() {
                let overlap = a.lower[i] < b.upper[i] && b.lower[i] < a.upper[i];
                prop_assert_eq!(*d < 0.0, overlap);
            }
        }
    }

    proptest! {
        #[test]
        fn intersect_commutes_and_associates(a in arb_box(2), b in arb_box(2), c in arb_box(2)) {
            prop_assert_eq!(intersect(&a, &b).unwrap(), intersect(&b, &a).unwrap());
            let left = match intersect(&a, &b).unwrap() {
                Intersection::Box(ab) => intersect(&ab, &c).unwrap(),
                Intersection::Empty => Intersection::Empty,
            };
            let right = match intersect(&b, &c).unwrap() {
                Intersection::Box(bc) => intersect(&a, &bc).unwrap(),
                Intersection::Empty => Intersection::Empty,
            };
            prop_assert_eq!(left, right);
        }
    }
}
