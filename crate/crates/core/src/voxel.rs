//! Binary occupancy grids over the canonical cube `[-0.5, 0.5]^3`.
//!
//! Cell `(ix, iy, iz)` of an `R`-grid covers
//! `[-0.5 + ix/R, -0.5 + (ix+1)/R] x ...` and is stored at flat index
//! `ix + R*iy + R*R*iz`.
//!
//! Grid files start with the ASCII line `SRVOX 1 <R> <shape_id>\n`, followed by
//! the `R^3` occupancy bits in flat order, packed eight per byte with the
//! lowest flat index in the least significant bit, zero-padded to a byte.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::Mesh;

const MAGIC: &str = "SRVOX";
const VERSION: &str = "1";
/// Slack allowed when checking that a mesh lies inside the canonical cube.
const NORMALIZED_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("resolution must be at least 2, got {0}")]
    BadResolution(usize),
    #[error("mesh is not normalized: bounding box leaves [-0.5, 0.5]^3")]
    NotNormalized,
    #[error("mesh has no vertices")]
    EmptyMesh,
    #[error("bad grid header: {0}")]
    BadHeader(String),
    #[error("payload holds {got} bytes but resolution {resolution} needs {expected}")]
    PayloadMismatch {
        resolution: usize,
        expected: usize,
        got: usize,
    },
    #[error("shape id {0:?} must be non-empty and free of whitespace")]
    BadShapeId(String),
    #[error("unknown fill mode {0:?} (expected surface or solid)")]
    BadFillMode(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FillMode {
    /// Cells touched by any triangle.
    #[default]
    Surface,
    /// Surface cells plus every cell not reachable from the grid boundary.
    Solid,
}

impl FromStr for FillMode {
    type Err = VoxelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surface" => Ok(FillMode::Surface),
            "solid" => Ok(FillMode::Solid),
            other => Err(VoxelError::BadFillMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelGrid {
    shape_id: String,
    resolution: usize,
    cells: Vec<bool>,
}

impl VoxelGrid {
    pub fn empty(shape_id: impl Into<String>, resolution: usize) -> Self {
        VoxelGrid {
            shape_id: shape_id.into(),
            resolution,
            cells: vec![false; resolution.pow(3)],
        }
    }

    /// Builds a grid from `cells` in flat order. Panics if the length is not `R^3`.
    pub fn from_cells(shape_id: impl Into<String>, resolution: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), resolution.pow(3), "cell count must equal R^3");
        VoxelGrid {
            shape_id: shape_id.into(),
            resolution,
            cells,
        }
    }

    pub fn shape_id(&self) -> &str {
        &self.shape_id
    }

    pub fn set_shape_id(&mut self, id: impl Into<String>) {
        self.shape_id = id.into();
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.resolution * (iy + self.resolution * iz)
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> bool {
        self.cells[self.index(ix, iy, iz)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, value: bool) {
        let i = self.index(ix, iy, iz);
        self.cells[i] = value;
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Coordinates of every occupied cell, in flat order.
    pub fn occupied(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let r = self.resolution;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(move |(i, _)| [i % r, (i / r) % r, i / (r * r)])
    }

    /// Flattens the grid into the network's layer-0 activation.
    pub fn to_input(&self) -> InputVector {
        grid_to_input(self)
    }

    /// Encodes the grid in the `SRVOX` file format.
    pub fn to_bytes(&self) -> Result<Vec<u8>, VoxelError> {
        if self.shape_id.is_empty() || self.shape_id.chars().any(char::is_whitespace) {
            return Err(VoxelError::BadShapeId(self.shape_id.clone()));
        }
        let mut out = format!("{MAGIC} {VERSION} {} {}\n", self.resolution, self.shape_id).into_bytes();
        let mut payload = vec![0u8; payload_len(self.resolution)];
        for (i, &c) in self.cells.iter().enumerate() {
            if c {
                payload[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VoxelError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| VoxelError::BadHeader("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| VoxelError::BadHeader("header is not UTF-8".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != MAGIC {
            return Err(VoxelError::BadHeader(format!("expected '{MAGIC} {VERSION} <R> <id>', got {header:?}")));
        }
        if fields[1] != VERSION {
            return Err(VoxelError::BadHeader(format!("unsupported version {}", fields[1])));
        }
        let resolution: usize = fields[2]
            .parse()
            .map_err(|_| VoxelError::BadHeader(format!("bad resolution {:?}", fields[2])))?;
        if resolution == 0 {
            return Err(VoxelError::BadResolution(0));
        }
        let shape_id = fields[3];
        if shape_id.is_empty() {
            return Err(VoxelError::BadShapeId(String::new()));
        }
        let payload = &bytes[nl + 1..];
        let expected = payload_len(resolution);
        if payload.len() != expected {
            return Err(VoxelError::PayloadMismatch {
                resolution,
                expected,
                got: payload.len(),
            });
        }
        let n = resolution.pow(3);
        let cells = (0..n).map(|i| payload[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(VoxelGrid {
            shape_id: shape_id.to_string(),
            resolution,
            cells,
        })
    }
}

fn payload_len(resolution: usize) -> usize {
    resolution.pow(3).div_ceil(8)
}

/// Flat 0/1 input vector of length `R^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputVector(pub Vec<f64>);

impl InputVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn grid_to_input(grid: &VoxelGrid) -> InputVector {
    InputVector(grid.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect())
}

pub fn write_grid(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<(), VoxelError> {
    let path = path.as_ref();
    fs::write(path, grid.to_bytes()?).map_err(|source| VoxelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<VoxelGrid, VoxelError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| VoxelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    VoxelGrid::from_bytes(&bytes)
}

/// Voxelizes a normalized mesh with an exact triangle/box overlap test.
pub fn voxelize(mesh: &Mesh, resolution: usize, fill: FillMode) -> Result<VoxelGrid, VoxelError> {
    if resolution < 2 {
        return Err(VoxelError::BadResolution(resolution));
    }
    let bb = mesh.bounds().ok_or(VoxelError::EmptyMesh)?;
    let lo = -0.5 - NORMALIZED_TOL;
    let hi = 0.5 + NORMALIZED_TOL;
    if bb.min.iter().any(|&v| v < lo) || bb.max.iter().any(|&v| v > hi) {
        return Err(VoxelError::NotNormalized);
    }

    let mut grid = VoxelGrid::empty(mesh.name.clone(), resolution);
    let r = resolution as f64;
    let h = 1.0 / r;
    let cell_of = |x: f64| (((x + 0.5) * r).floor() as i64).clamp(0, resolution as i64 - 1) as usize;

    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangle(t);
        let mut range = [(0usize, 0usize); 3];
        for (k, slot) in range.iter_mut().enumerate() {
            let mn = tri.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
            let mx = tri.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
            // Widen by one cell so faces lying on a cell wall reach both sides.
            *slot = (cell_of(mn).saturating_sub(1), (cell_of(mx) + 1).min(resolution - 1));
        }
        for iz in range[2].0..=range[2].1 {
            for iy in range[1].0..=range[1].1 {
                for ix in range[0].0..=range[0].1 {
                    if grid.get(ix, iy, iz) {
                        continue;
                    }
                    let center = [
                        -0.5 + (ix as f64 + 0.5) * h,
                        -0.5 + (iy as f64 + 0.5) * h,
                        -0.5 + (iz as f64 + 0.5) * h,
                    ];
                    if tri_box_overlap(center, 0.5 * h, &tri) {
                        grid.set(ix, iy, iz, true);
                    }
                }
            }
        }
    }

    if fill == FillMode::Solid {
        fill_interior(&mut grid);
    }
    Ok(grid)
}

/// Marks every empty cell that cannot reach the grid boundary through empty
/// cells (6-connectivity).
pub fn fill_interior(grid: &mut VoxelGrid) {
    let r = grid.resolution;
    let mut outside = vec![false; grid.cells.len()];
    let mut queue = VecDeque::new();
    for iz in 0..r {
        for iy in 0..r {
            for ix in 0..r {
                let on_boundary = ix == 0 || iy == 0 || iz == 0 || ix == r - 1 || iy == r - 1 || iz == r - 1;
                let i = grid.index(ix, iy, iz);
                if on_boundary && !grid.cells[i] {
                    outside[i] = true;
                    queue.push_back([ix, iy, iz]);
                }
            }
        }
    }
    while let Some([x, y, z]) = queue.pop_front() {
        let neighbours = [
            (x.wrapping_sub(1), y, z),
            (x + 1, y, z),
            (x, y.wrapping_sub(1), z),
            (x, y + 1, z),
            (x, y, z.wrapping_sub(1)),
            (x, y, z + 1),
        ];
        for (nx, ny, nz) in neighbours {
            if nx >= r || ny >= r || nz >= r {
                continue;
            }
            let i = grid.index(nx, ny, nz);
            if !grid.cells[i] && !outside[i] {
                outside[i] = true;
                queue.push_back([nx, ny, nz]);
            }
        }
    }
    for (cell, out) in grid.cells.iter_mut().zip(outside) {
        if !out {
            *cell = true;
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Separating-axis test between a closed cube (center, half side) and a
/// triangle. Touching counts as overlap.
pub fn tri_box_overlap(center: [f64; 3], half: f64, tri: &[[f64; 3]; 3]) -> bool {
    let v = [sub(tri[0], center), sub(tri[1], center), sub(tri[2], center)];
    let edges = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];

    let separated = |axis: [f64; 3]| {
        let p = [dot(v[0], axis), dot(v[1], axis), dot(v[2], axis)];
        let mn = p[0].min(p[1]).min(p[2]);
        let mx = p[0].max(p[1]).max(p[2]);
        let rad = half * (axis[0].abs() + axis[1].abs() + axis[2].abs());
        mn > rad || mx < -rad
    };

    // Box face normals.
    for k in 0..3 {
        let mut axis = [0.0; 3];
        axis[k] = 1.0;
        if separated(axis) {
            return false;
        }
    }
    // Triangle normal.
    let normal = cross(edges[0], edges[1]);
    if separated(normal) {
        return false;
    }
    // Edge x box-axis cross products.
    for e in edges {
        for k in 0..3 {
            let mut unit = [0.0; 3];
            unit[k] = 1.0;
            let axis = cross(e, unit);
            if axis == [0.0; 3] {
                continue;
            }
            if separated(axis) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_mesh;

    #[test]
    fn cube_shell_surface() {
        let cube = box_mesh("cube", [-0.45; 3], [0.45; 3]);
        let g = voxelize(&cube, 15, FillMode::Surface).unwrap();
        for iz in 0..15 {
            for iy in 0..15 {
                for ix in 0..15 {
                    let shell = [ix, iy, iz].iter().any(|&c| c == 0 || c == 14);
                    assert_eq!(g.get(ix, iy, iz), shell, "cell {ix},{iy},{iz}");
                }
            }
        }
        assert_eq!(g.occupied_count(), 15usize.pow(3) - 13usize.pow(3));
    }

    #[test]
    fn cube_solid_fills_interior() {
        let cube = box_mesh("cube", [-0.45; 3], [0.45; 3]);
        let g = voxelize(&cube, 15, FillMode::Solid).unwrap();
        assert_eq!(g.occupied_count(), 15usize.pow(3));
    }

    #[test]
    fn smaller_cube_solid_leaves_outside_empty() {
        let cube = box_mesh("cube", [-0.2; 3], [0.2; 3]);
        let surface = voxelize(&cube, 10, FillMode::Surface).unwrap();
        let solid = voxelize(&cube, 10, FillMode::Solid).unwrap();
        assert!(solid.occupied_count() > surface.occupied_count());
        assert!(!solid.get(0, 0, 0));
        for (s, f) in surface.cells().iter().zip(solid.cells()) {
            assert!(!s || *f);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cube = box_mesh("cube", [-0.45; 3], [0.45; 3]);
        assert!(matches!(voxelize(&cube, 1, FillMode::Surface), Err(VoxelError::BadResolution(1))));
        let big = box_mesh("big", [-1.0; 3], [1.0; 3]);
        assert!(matches!(voxelize(&big, 8, FillMode::Surface), Err(VoxelError::NotNormalized)));
    }

    #[test]
    fn flatten_order() {
        let empty = VoxelGrid::empty("e", 2);
        assert_eq!(grid_to_input(&empty).0, vec![0.0; 8]);
        let mut one = VoxelGrid::empty("o", 2);
        one.set(1, 0, 0, true);
        let v = grid_to_input(&one).0;
        assert_eq!(v[1], 1.0);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        let full = VoxelGrid::from_cells("f", 2, vec![true; 8]);
        assert_eq!(grid_to_input(&full).0, vec![1.0; 8]);
    }

    #[test]
    fn payload_size_for_r15() {
        let g = VoxelGrid::empty("s", 15);
        let bytes = g.to_bytes().unwrap();
        let header = b"SRVOX 1 15 s\n".len();
        assert_eq!(bytes.len() - header, 422);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = VoxelGrid::empty("s", 2).to_bytes().unwrap();
        bytes[..5].copy_from_slice(b"XXXX ");
        assert!(matches!(VoxelGrid::from_bytes(&bytes), Err(VoxelError::BadHeader(_))));
    }

    #[test]
    fn payload_length_mismatch_rejected() {
        let mut bytes = VoxelGrid::empty("s", 4).to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(VoxelGrid::from_bytes(&bytes), Err(VoxelError::PayloadMismatch { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cube = box_mesh("cube", [-0.3; 3], [0.4; 3]);
        let g = voxelize(&cube, 9, FillMode::Solid).unwrap();
        let path = dir.path().join("cube.srvox");
        write_grid(&g, &path).unwrap();
        assert_eq!(read_grid(&path).unwrap(), g);
    }

    #[test]
    fn whitespace_shape_id_rejected() {
        assert!(VoxelGrid::empty("a b", 2).to_bytes().is_err());
    }

    #[test]
    fn cube_is_rotation_invariant() {
        let cube = box_mesh("cube", [-0.37; 3], [0.37; 3]);
        let g = voxelize(&cube, 11, FillMode::Surface).unwrap();
        let r = 11;
        // 90 degree rotation about z: (x, y) -> (r-1-y, x).
        for [x, y, z] in g.occupied() {
            assert!(g.get(r - 1 - y, x, z));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tri_strategy() -> impl Strategy<Value = [[f64; 3]; 3]> {
            prop::array::uniform3(prop::array::uniform3(-0.49f64..0.49))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn grid_bytes_round_trip(cells in prop::collection::vec(any::<bool>(), 27)) {
                let g = VoxelGrid::from_cells("g", 3, cells);
                prop_assert_eq!(VoxelGrid::from_bytes(&g.to_bytes().unwrap()).unwrap(), g);
            }

            #[test]
            fn triangle_order_does_not_matter(tris in prop::collection::vec(tri_strategy(), 1..8), res in 2usize..10) {
                let mut vertices = Vec::new();
                let mut triangles = Vec::new();
                for t in &tris {
                    let b = vertices.len();
                    vertices.extend_from_slice(t);
                    triangles.push([b, b + 1, b + 2]);
                }
                let mesh = Mesh { name: "m".into(), vertices: vertices.clone(), triangles: triangles.clone() };
                let mut rev = triangles;
                rev.reverse();
                let reversed = Mesh { name: "m".into(), vertices, triangles: rev };
                let a = voxelize(&mesh, res, FillMode::Surface).unwrap();
                let b = voxelize(&reversed, res, FillMode::Surface).unwrap();
                prop_assert_eq!(&a, &b);
                let solid = voxelize(&mesh, res, FillMode::Solid).unwrap();
                for (s, f) in a.cells().iter().zip(solid.cells()) {
                    prop_assert!(!s || *f);
                }
            }
        }
    }
}
