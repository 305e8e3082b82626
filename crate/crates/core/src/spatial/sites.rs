use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// A finite set of locations with a precomputed Euclidean distance matrix.
///
/// One-dimensional layouts are stored with a zero second coordinate.
/// Longitude/latitude pairs are treated as planar coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "SiteCoords", into = "SiteCoords")]
pub struct SiteSet {
    coords: Vec<[f64; 2]>,
    distances: Option<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SiteCoords {
    coords: Vec<[f64; 2]>,
}

impl From<SiteCoords> for SiteSet {
    fn from(c: SiteCoords) -> Self {
        Self::planar(c.coords)
    }
}

impl From<SiteSet> for SiteCoords {
    fn from(s: SiteSet) -> Self {
        Self { coords: s.coords }
    }
}

impl PartialEq for SiteSet {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
    }
}

impl SiteSet {
    pub fn planar(coords: Vec<[f64; 2]>) -> Self {
        let distances = Some(pairwise(&coords, &coords));
        Self { coords, distances }
    }

    pub fn line(xs: &[f64]) -> Self {
        Self::planar(xs.iter().map(|&x| [x, 0.0]).collect())
    }

    /// `n` equidistant points covering `[lo, hi]`.
    pub fn equispaced(n: usize, lo: f64, hi: f64) -> Self {
        let xs: Vec<f64> = if n == 1 {
            vec![lo]
        } else {
            (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect()
        };
        Self::line(&xs)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn distances(&self) -> DMatrix<f64> {
        match &self.distances {
            Some(d) => d.clone(),
            None => pairwise(&self.coords, &self.coords),
        }
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        match &self.distances {
            Some(d) => d[(i, j)],
            None => euclid(&self.coords[i], &self.coords[j]),
        }
    }

    /// Distances from every site in `self` (rows) to every site in `other`.
    pub fn cross_distances(&self, other: &SiteSet) -> DMatrix<f64> {
        pairwise(&self.coords, &other.coords)
    }

    /// Distance of each site to a reference point.
    pub fn distances_to(&self, point: [f64; 2]) -> Vec<f64> {
        self.coords.iter().map(|c| euclid(c, &point)).collect()
    }

    /// First pair of coincident sites, if any.
    pub fn first_duplicate(&self) -> Option<(usize, usize)> {
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                if self.distance(i, j) == 0.0 {
                    return Some((i, j));
                }
            }
        }
        None
    }
}

fn euclid(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn pairwise(a: &[[f64; 2]], b: &[[f64; 2]]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| euclid(&a[i], &b[j]))
}
