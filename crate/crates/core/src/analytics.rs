//! Inference distances, 3D-PCA projections and chart data for explanation
//! trees.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::chain::{ChainNode, ChainTree, ClassChain, ClassNode};
use crate::error::{ChainError, Result};
use crate::inference::InferenceWeights;
use crate::linalg::{symmetric_eigen, Matrix};
use crate::netcore::Level;
use crate::scalar::{dist2, Scalar};

/// Inference weights of one concept over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct WeightSet<T> {
    pub set_id: String,
    pub concept_id: String,
    pub layer: String,
    /// `(instance_id, weights)`.
    pub members: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> WeightSet<T> {
    /// Raw vectors; every member must have the same length.
    pub fn new(
        set_id: impl Into<String>,
        concept_id: impl Into<String>,
        layer: impl Into<String>,
        members: Vec<(String, Vec<T>)>,
    ) -> Result<Self> {
        let set = WeightSet {
            set_id: set_id.into(),
            concept_id: concept_id.into(),
            layer: layer.into(),
            members,
        };
        set.dim()?;
        Ok(set)
    }

    /// Members must share the deep concept and the shallow layer.
    pub fn from_inference(
        set_id: impl Into<String>,
        members: Vec<(String, InferenceWeights<T>)>,
    ) -> Result<Self> {
        let set_id = set_id.into();
        let first = members
            .first()
            .ok_or_else(|| ChainError::InvalidArgument(format!("weight set `{set_id}` is empty")))?;
        let concept = first.1.deep_concept.concept_id.clone();
        let layer = first.1.shallow_layer.clone();
        for (id, w) in &members {
            if w.deep_concept.concept_id != concept || w.shallow_layer != layer {
                return Err(ChainError::InvalidArgument(format!(
                    "member `{id}` of `{set_id}` is for concept `{}` on `{}`, expected `{concept}` on `{layer}`",
                    w.deep_concept.concept_id, w.shallow_layer
                )));
            }
        }
        Self::new(
            set_id,
            concept,
            layer,
            members.into_iter().map(|(id, w)| (id, w.weights)).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Common weight dimensionality.
    pub fn dim(&self) -> Result<usize> {
        let first = self.members.first().ok_or_else(|| {
            ChainError::InvalidArgument(format!("weight set `{}` is empty", self.set_id))
        })?;
        let d = first.1.len();
        if let Some((id, w)) = self.members.iter().find(|(_, w)| w.len() != d) {
            return Err(ChainError::ShapeMismatch(format!(
                "member `{id}` of `{}` has {} weights, expected {d}",
                self.set_id,
                w.len()
            )));
        }
        Ok(d)
    }

    /// `set_id:concept_id`, the row label used in distance tables.
    pub fn label(&self) -> String {
        format!("{}:{}", self.set_id, self.concept_id)
    }
}

/// Coordinate-wise mean of the member weights.
pub fn inference_centroid<T: Scalar>(set: &WeightSet<T>) -> Result<Vec<T>> {
    let d = set.dim()?;
    let mut c = vec![T::zero(); d];
    for (_, w) in &set.members {
        for (ci, &wi) in c.iter_mut().zip(w) {
            *ci += wi;
        }
    }
    let n = T::from_count(set.len());
    c.iter_mut().for_each(|v| *v /= n);
    Ok(c)
}

/// Mean Euclidean distance of the members to their centroid.
pub fn intra_set_distance<T: Scalar>(set: &WeightSet<T>) -> Result<T> {
    let c = inference_centroid(set)?;
    let total: T = set.members.iter().map(|(_, w)| dist2(w, &c)).sum();
    Ok(total / T::from_count(set.len()))
}

/// Euclidean distance between the two centroids.
pub fn inter_set_distance<T: Scalar>(a: &WeightSet<T>, b: &WeightSet<T>) -> Result<T> {
    let (da, db) = (a.dim()?, b.dim()?);
    if da != db {
        return Err(ChainError::ShapeMismatch(format!(
            "`{}` has {da} weights, `{}` has {db}",
            a.set_id, b.set_id
        )));
    }
    Ok(dist2(&inference_centroid(a)?, &inference_centroid(b)?))
}

/// Square table over sets: intra-set distances on the diagonal, centroid
/// distances elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct DistanceTable<T> {
    pub labels: Vec<String>,
    pub entries: Vec<Vec<T>>,
}

impl<T: Scalar> DistanceTable<T> {
    pub fn compute(sets: &[WeightSet<T>]) -> Result<Self> {
        if sets.is_empty() {
            return Err(ChainError::InvalidArgument("no weight sets".into()));
        }
        let n = sets.len();
        let mut entries = vec![vec![T::zero(); n]; n];
        for i in 0..n {
            entries[i][i] = intra_set_distance(&sets[i])?;
            for j in i + 1..n {
                let d = inter_set_distance(&sets[i], &sets[j])?;
                entries[i][j] = d;
                entries[j][i] = d;
            }
        }
        Ok(DistanceTable {
            labels: sets.iter().map(WeightSet::label).collect(),
            entries,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i][j]
    }

    /// CSV with a leading label column and four decimals per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("set");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.entries) {
            out.push_str(l);
            for v in row {
                let _ = write!(out, ",{:.4}", v.to_f64_lossy());
            }
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// PCA

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct PcaPoint<T> {
    pub instance_id: String,
    pub set_id: String,
    pub coords: [T; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Pca3<T> {
    pub points: Vec<PcaPoint<T>>,
    pub explained_variance_ratio: [T; 3],
    /// Unit principal directions; all-zero rows pad a rank-deficient fit.
    pub components: Vec<Vec<T>>,
    pub mean: Vec<T>,
    pub rank: usize,
    /// Set when fewer than three components carry variance.
    pub degenerate: bool,
}

impl<T: Scalar> Pca3<T> {
    /// Maps coordinates back to weight space.
    pub fn reconstruct(&self, coords: &[T; 3]) -> Vec<T> {
        let mut out = self.mean.clone();
        for (k, comp) in self.components.iter().enumerate() {
            for (o, &c) in out.iter_mut().zip(comp) {
                *o += coords[k] * c;
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance_id,set_id,pc1,pc2,pc3\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                p.instance_id,
                p.set_id,
                p.coords[0].to_f64_lossy(),
                p.coords[1].to_f64_lossy(),
                p.coords[2].to_f64_lossy()
            );
        }
        out
    }
}

/// Projects the pooled members of all sets onto their top three principal
/// components.
pub fn pca3_project<T: Scalar>(sets: &[WeightSet<T>]) -> Result<Pca3<T>> {
    let mut rows: Vec<(&str, &str, &[T])> = Vec::new();
    let mut dim = None;
    for s in sets {
        let d = s.dim()?;
        if *dim.get_or_insert(d) != d {
            return Err(ChainError::ShapeMismatch(format!(
                "set `{}` has {d} weights, others have {}",
                s.set_id,
                dim.unwrap_or(0)
            )));
        }
        for (id, w) in &s.members {
            rows.push((id, &s.set_id, w));
        }
    }
    let d = dim.unwrap_or(0);
    if rows.len() < 3 || d < 3 {
        return Err(ChainError::InvalidArgument(format!(
            "3D-PCA needs at least 3 members of dimension ≥ 3, got {} of dimension {d}",
            rows.len()
        )));
    }
    let n = T::from_count(rows.len());
    let mut mean = vec![T::zero(); d];
    for (_, _, w) in &rows {
        for (m, &v) in mean.iter_mut().zip(w.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov: Matrix<T> = Matrix::zeros(d, d);
    let mut centered = Vec::with_capacity(rows.len());
    for (_, _, w) in &rows {
        let c: Vec<T> = w.iter().zip(&mean).map(|(&v, &m)| v - m).collect();
        for i in 0..d {
            let ci = c[i];
            if ci == T::zero() {
                continue;
            }
            let r = cov.row_mut(i);
            for j in 0..d {
                r[j] += ci * c[j];
            }
        }
        centered.push(c);
    }
    let denom = T::from_count(rows.len().saturating_sub(1).max(1));
    let cov: Matrix<T> = Matrix::from_vec(d, d, cov.as_slice().iter().map(|&v| v / denom).collect())?;
    let eig = symmetric_eigen(&cov)?;

    let total: T = eig.values.iter().map(|&v| v.max(T::zero())).sum();
    let top = eig.values.first().copied().unwrap_or_else(T::zero).max(T::zero());
    let floor = top * T::lit(1e-12);
    let rank = eig.values.iter().filter(|&&v| v > floor && v > T::zero()).count();

    let mut components = Vec::with_capacity(3);
    let mut ratio = [T::zero(); 3];
    for k in 0..3 {
        if k < rank {
            let mut v = eig.vectors.column(k);
            let lead = v
                .iter()
                .enumerate()
                .fold((0, T::zero()), |(bi, bv), (i, &x)| if x.abs() > bv.abs() { (i, x) } else { (bi, bv) });
            if lead.1 < T::zero() {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            ratio[k] = eig.values[k] / total;
            components.push(v);
        } else {
            components.push(vec![T::zero(); d]);
        }
    }
    let points = rows
        .iter()
        .zip(&centered)
        .map(|((id, set, _), c)| {
            let mut coords = [T::zero(); 3];
            for (k, comp) in components.iter().enumerate() {
                coords[k] = crate::scalar::dot(c, comp);
            }
            PcaPoint {
                instance_id: id.to_string(),
                set_id: set.to_string(),
                coords,
            }
        })
        .collect();
    Ok(Pca3 {
        points,
        explained_variance_ratio: ratio,
        components,
        mean,
        rank: rank.min(3),
        degenerate: rank < 3,
    })
}

// ---------------------------------------------------------------------------
// Sunburst

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct SunburstNode<T> {
    pub name: String,
    /// Angular size as a fraction of the full circle.
    pub value: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
    /// Fraction of the parent section.
    pub share: T,
    /// Signed contribution as found in the tree.
    pub contribution: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    pub children: Vec<SunburstNode<T>>,
}

pub const ALL_ZERO_FLAG: &str = "all-zero-contributions";

/// Clips at zero and renormalizes; an all-zero group gets equal shares and
/// the flag is raised.
pub fn ring_shares<T: Scalar>(contributions: &[T]) -> (Vec<T>, bool) {
    let clipped: Vec<T> = contributions.iter().map(|&c| c.max(T::zero())).collect();
    let total: T = clipped.iter().copied().sum();
    if clipped.is_empty() {
        return (clipped, false);
    }
    if total > T::zero() {
        (clipped.into_iter().map(|c| c / total).collect(), false)
    } else {
        let n = T::from_count(contributions.len());
        (vec![T::one() / n; contributions.len()], true)
    }
}

trait ChartNode<T> {
    fn name(&self) -> &str;
    fn level(&self) -> Level;
    fn contribution(&self) -> T;
    fn kids(&self) -> &[Self]
    where
        Self: Sized;
}

impl<T: Scalar> ChartNode<T> for ChainNode<T> {
    fn name(&self) -> &str {
        &self.concept_id
    }
    fn level(&self) -> Level {
        self.level
    }
    fn contribution(&self) -> T {
        self.contribution
    }
    fn kids(&self) -> &[Self] {
        &self.children
    }
}

impl<T: Scalar> ChartNode<T> for ClassNode<T> {
    fn name(&self) -> &str {
        &self.concept_id
    }
    fn level(&self) -> Level {
        self.level
    }
    fn contribution(&self) -> T {
        self.contribution
    }
    fn kids(&self) -> &[Self] {
        &self.children
    }
}

fn ring<T: Scalar, N: ChartNode<T>>(nodes: &[N], parent_value: T) -> Vec<SunburstNode<T>> {
    let contributions: Vec<T> = nodes.iter().map(ChartNode::contribution).collect();
    let (shares, all_zero) = ring_shares(&contributions);
    let mut out: Vec<SunburstNode<T>> = nodes
        .iter()
        .zip(shares)
        .map(|(n, share)| {
            let value = parent_value * share;
            SunburstNode {
                name: n.name().to_string(),
                value,
                level: Some(n.level()),
                share,
                contribution: n.contribution(),
                flag: all_zero.then(|| ALL_ZERO_FLAG.to_string()),
                children: ring(n.kids(), value),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.share
            .partial_cmp(&a.share)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                b.contribution
                    .partial_cmp(&a.contribution)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| a.name.cmp(&b.name))
    });
    out
}

/// Chart data for an instance tree. The centre is the predicted class and
/// the first ring holds the scene concept.
pub fn emit_sunburst_tree<T: Scalar>(tree: &ChainTree<T>) -> Result<SunburstNode<T>> {
    tree.validate()?;
    Ok(SunburstNode {
        name: tree.predicted_class.clone(),
        value: T::one(),
        level: None,
        share: T::one(),
        contribution: T::one(),
        flag: None,
        children: ring(std::slice::from_ref(&tree.root), T::one()),
    })
}

/// Chart data for a class chain.
pub fn emit_sunburst_class<T: Scalar>(class: &ClassChain<T>) -> Result<SunburstNode<T>> {
    Ok(SunburstNode {
        name: class.class_id.clone(),
        value: T::one(),
        level: None,
        share: T::one(),
        contribution: T::one(),
        flag: None,
        children: ring(&class.roots, T::one()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(id: &str, ws: &[&[f64]]) -> WeightSet<f64> {
        WeightSet::new(
            id,
            "farm",
            "object",
            ws.iter().enumerate().map(|(i, w)| (format!("{id}{i}"), w.to_vec())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn centroid_examples() {
        let s = set("a", &[&[1.0, -2.0]]);
        assert_eq!(inference_centroid(&s).unwrap(), vec![1.0, -2.0]);
        let s = set("a", &[&[1.0, -2.0], &[-1.0, 2.0]]);
        assert_eq!(inference_centroid(&s).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn intra_of_symmetric_pair_is_offset_norm() {
        let s = set("a", &[&[1.0 + 3.0, 2.0 + 4.0], &[1.0 - 3.0, 2.0 - 4.0]]);
        assert!((intra_set_distance(&s).unwrap() - 5.0).abs() < 1e-12);
        let same = set("b", &[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(intra_set_distance(&same).unwrap(), 0.0);
    }

    #[test]
    fn inter_of_singletons_is_euclidean() {
        let a = set("a", &[&[0.0, 0.0]]);
        let b = set("b", &[&[3.0, 4.0]]);
        assert_eq!(inter_set_distance(&a, &b).unwrap(), 5.0);
        assert_eq!(inter_set_distance(&a, &a).unwrap(), 0.0);
        let c = set("c", &[&[1.0, 2.0, 3.0]]);
        assert!(inter_set_distance(&a, &c).is_err());
    }

    #[test]
    fn empty_set_rejected() {
        assert!(WeightSet::<f64>::new("a", "c", "l", vec![]).is_err());
    }

    #[test]
    fn table_csv_has_four_decimals() {
        let t = DistanceTable::compute(&[set("a", &[&[0.0, 0.0]]), set("b", &[&[3.0, 4.0]])]).unwrap();
        assert_eq!(
            t.to_csv(),
            "set,a:farm,b:farm\na:farm,0.0000,5.0000\nb:farm,5.0000,0.0000\n"
        );
    }

    #[test]
    fn ring_share_examples() {
        let (s, f) = ring_shares(&[0.6f64, 0.3, 0.1]);
        assert!(!f);
        assert!((s[0] - 0.6).abs() < 1e-12 && (s[2] - 0.1).abs() < 1e-12);
        let (s, _) = ring_shares(&[0.5f64, -0.2, 0.5]);
        assert_eq!(s, vec![0.5, 0.0, 0.5]);
        let (s, f) = ring_shares(&[0.0f64, -1.0]);
        assert!(f);
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn pca_of_planar_data_is_exact() {
        let ws: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let (a, b, c) = (i as f64, (i * i % 5) as f64, (i % 3) as f64);
                vec![a + b, b - c, c, a - c, 2.0 * a + 1.0]
            })
            .collect();
        let refs: Vec<&[f64]> = ws.iter().map(|w| w.as_slice()).collect();
        let p = pca3_project(&[set("a", &refs)]).unwrap();
        for (pt, w) in p.points.iter().zip(&ws) {
            let r = p.reconstruct(&pt.coords);
            for (x, y) in r.iter().zip(w) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let r = p.explained_variance_ratio;
        assert!(r[0] >= r[1] && r[1] >= r[2]);
    }

    #[test]
    fn pca_flags_low_rank() {
        let p = pca3_project(&[set("a", &[&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0], &[4.0, 0.0, 0.0]])]).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.rank, 1);
        assert!(p.points.iter().all(|q| q.coords[1] == 0.0 && q.coords[2] == 0.0));
    }
}
