//! Cartesian voxel lattice with 6-connectivity.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Absorption rate fraction used throughout the experiments: signalling
/// molecules leave through each exposed boundary face at `d / 50`.
pub const DEFAULT_ABSORB_FRACTION: f64 = 1.0 / 50.0;

/// 1-based voxel coordinate `(x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl VoxelIndex {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        Self { x, y, z }
    }

    pub fn is_adjacent(&self, other: &VoxelIndex) -> bool {
        let d = self.x.abs_diff(other.x) + self.y.abs_diff(other.y) + self.z.abs_diff(other.z);
        d == 1
    }
}

impl std::fmt::Display for VoxelIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.x, self.y, self.z)
    }
}

impl From<[u32; 3]> for VoxelIndex {
    fn from(v: [u32; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Boundary {
    Reflecting,
    /// Each exposed face of a boundary voxel absorbs at `rate_fraction * d`.
    Absorbing { rate_fraction: f64 },
}

impl Boundary {
    pub fn absorbing_default() -> Self {
        Boundary::Absorbing {
            rate_fraction: DEFAULT_ABSORB_FRACTION,
        }
    }
}

/// One of the six axis directions, in the order neighbours are enumerated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Face {
    MinusX,
    PlusX,
    MinusY,
    PlusY,
    MinusZ,
    PlusZ,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::MinusX,
        Face::PlusX,
        Face::MinusY,
        Face::PlusY,
        Face::MinusZ,
        Face::PlusZ,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    dims: [u32; 3],
    w: f64,
    boundary: Boundary,
}

impl SpatialGrid {
    pub fn new(dims: [u32; 3], w: f64, boundary: Boundary) -> Result<Self, ModelError> {
        if dims.contains(&0) {
            return Err(ModelError::InvalidGrid(format!(
                "voxel counts must be positive, got {dims:?}"
            )));
        }
        if !(w > 0.0 && w.is_finite()) {
            return Err(ModelError::InvalidGrid(format!(
                "voxel edge must be positive, got {w}"
            )));
        }
        if let Boundary::Absorbing { rate_fraction } = boundary {
            if !(rate_fraction >= 0.0 && rate_fraction.is_finite()) {
                return Err(ModelError::InvalidGrid(format!(
                    "absorption fraction must be non-negative, got {rate_fraction}"
                )));
            }
        }
        Ok(Self { dims, w, boundary })
    }

    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    /// Voxel edge length in µm.
    pub fn edge(&self) -> f64 {
        self.w
    }

    /// Voxel volume `w³` in µm³.
    pub fn volume(&self) -> f64 {
        self.w * self.w * self.w
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn contains(&self, v: VoxelIndex) -> bool {
        v.x >= 1
            && v.y >= 1
            && v.z >= 1
            && v.x <= self.dims[0]
            && v.y <= self.dims[1]
            && v.z <= self.dims[2]
    }

    /// Linear index, x fastest.
    pub fn linear(&self, v: VoxelIndex) -> Option<usize> {
        if !self.contains(v) {
            return None;
        }
        let [nx, ny, _] = self.dims;
        Some(((v.z - 1) * ny * nx + (v.y - 1) * nx + (v.x - 1)) as usize)
    }

    pub fn voxel(&self, linear: usize) -> VoxelIndex {
        let [nx, ny, _] = self.dims;
        let l = linear as u32;
        VoxelIndex::new(l % nx + 1, (l / nx) % ny + 1, l / (nx * ny) + 1)
    }

    pub fn neighbour(&self, v: VoxelIndex, face: Face) -> Option<VoxelIndex> {
        let n = match face {
            Face::MinusX => VoxelIndex::new(v.x.wrapping_sub(1), v.y, v.z),
            Face::PlusX => VoxelIndex::new(v.x + 1, v.y, v.z),
            Face::MinusY => VoxelIndex::new(v.x, v.y.wrapping_sub(1), v.z),
            Face::PlusY => VoxelIndex::new(v.x, v.y + 1, v.z),
            Face::MinusZ => VoxelIndex::new(v.x, v.y, v.z.wrapping_sub(1)),
            Face::PlusZ => VoxelIndex::new(v.x, v.y, v.z + 1),
        };
        self.contains(n).then_some(n)
    }

    /// Directed neighbour pairs `(from, to)` as linear indices.
    pub fn directed_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.voxel_count() {
            let v = self.voxel(l);
            for face in Face::ALL {
                if let Some(n) = self.neighbour(v, face) {
                    out.push((l, self.linear(n).expect("neighbour inside grid")));
                }
            }
        }
        out
    }

    /// Boundary faces `(voxel, face)` with no neighbour across them.
    pub fn exposed_faces(&self) -> Vec<(usize, Face)> {
        let mut out = Vec::new();
        for l in 0..self.voxel_count() {
            let v = self.voxel(l);
            for face in Face::ALL {
                if self.neighbour(v, face).is_none() {
                    out.push((l, face));
                }
            }
        }
        out
    }

    /// Number of internal faces shared by two voxels.
    pub fn internal_faces(&self) -> usize {
        let [nx, ny, nz] = self.dims.map(|d| d as usize);
        (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_cube_has_125_voxels() {
        let g = SpatialGrid::new([5, 5, 5], 1.0 / 3.0, Boundary::absorbing_default()).unwrap();
        assert_eq!(g.voxel_count(), 125);
        assert_eq!(g.directed_pairs().len(), 2 * g.internal_faces());
        assert_eq!(g.exposed_faces().len(), 6 * 25);
    }

    #[test]
    fn single_voxel_has_no_neighbours() {
        let g = SpatialGrid::new([1, 1, 1], 1.0, Boundary::Reflecting).unwrap();
        assert!(g.directed_pairs().is_empty());
        assert_eq!(g.exposed_faces().len(), 6);
    }

    #[test]
    fn line_of_three_has_four_directed_pairs() {
        let g = SpatialGrid::new([3, 1, 1], 1.0 / 3.0, Boundary::Reflecting).unwrap();
        assert_eq!(g.directed_pairs(), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(SpatialGrid::new([0, 1, 1], 1.0, Boundary::Reflecting).is_err());
        assert!(SpatialGrid::new([1, 1, 1], 0.0, Boundary::Reflecting).is_err());
        assert!(SpatialGrid::new([1, 1, 1], -1.0, Boundary::Reflecting).is_err());
    }

    #[test]
    fn linear_index_roundtrip() {
        let g = SpatialGrid::new([4, 3, 2], 1.0, Boundary::Reflecting).unwrap();
        for l in 0..g.voxel_count() {
            assert_eq!(g.linear(g.voxel(l)), Some(l));
        }
        assert_eq!(g.linear(VoxelIndex::new(1, 1, 1)), Some(0));
        assert_eq!(g.linear(VoxelIndex::new(5, 1, 1)), None);
        assert_eq!(g.linear(VoxelIndex::new(0, 1, 1)), None);
    }
}
