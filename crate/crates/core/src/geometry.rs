//! Triangle meshes: Wavefront OBJ loading and canonical-cube normalization.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed {kind} record: {text}")]
    Malformed {
        line: usize,
        kind: &'static str,
        text: String,
    },
    #[error("line {line}: vertex index {index} out of range (mesh has {count} vertices)")]
    IndexOutOfRange { line: usize, index: i64, count: usize },
    #[error("mesh has no faces")]
    NoFaces,
    #[error("degenerate mesh: bounding box has zero extent")]
    Degenerate,
    #[error("padding must lie in [0, 1), got {0}")]
    BadPadding(f64),
}

/// A triangle mesh in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub name: String,
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn max_extent(&self) -> f64 {
        let e = self.extent();
        e[0].max(e[1]).max(e[2])
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }
}

impl Mesh {
    /// Checks index validity and the minimum size of a usable mesh.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.triangles.is_empty() {
            return Err(GeometryError::NoFaces);
        }
        for tri in &self.triangles {
            for &i in tri {
                if i >= self.vertices.len() {
                    return Err(GeometryError::IndexOutOfRange {
                        line: 0,
                        index: i as i64,
                        count: self.vertices.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Bounding box of all vertices; `None` for a mesh without vertices.
    pub fn bounds(&self) -> Option<Aabb> {
        let mut it = self.vertices.iter();
        let first = *it.next()?;
        let mut bb = Aabb {
            min: first,
            max: first,
        };
        for v in it {
            for k in 0..3 {
                bb.min[k] = bb.min[k].min(v[k]);
                bb.max[k] = bb.max[k].max(v[k]);
            }
        }
        Some(bb)
    }

    pub fn triangle(&self, t: usize) -> [[f64; 3]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }
}

/// Reads a Wavefront OBJ file. Only `v` and `f` records are interpreted;
/// polygons are fan-triangulated.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh, GeometryError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_obj(&text, name)
}

/// Parses OBJ text. Negative face indices count back from the most recently
/// declared vertex.
pub fn parse_obj(text: &str, name: impl Into<String>) -> Result<Mesh, GeometryError> {
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    // (line, raw corner indices, vertices declared so far); resolved after the scan.
    let mut faces: Vec<(usize, Vec<i64>, usize)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .map(str::parse::<f64>)
                    .collect::<Result<_, _>>()
                    .map_err(|_| malformed(line_no, "vertex", raw))?;
                if coords.len() < 3 || coords.len() > 4 || coords.iter().any(|c| !c.is_finite()) {
                    return Err(malformed(line_no, "vertex", raw));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let mut corners = Vec::new();
                for tok in tokens {
                    let first = tok.split('/').next().unwrap_or("");
                    let idx: i64 = first.parse().map_err(|_| malformed(line_no, "face", raw))?;
                    if idx == 0 {
                        return Err(malformed(line_no, "face", raw));
                    }
                    corners.push(idx);
                }
                if corners.len() < 3 {
                    return Err(malformed(line_no, "face", raw));
                }
                faces.push((line_no, corners, vertices.len()));
            }
            _ => {}
        }
    }

    let count = vertices.len();
    let mut triangles = Vec::new();
    for (line, corners, seen) in faces {
        let resolved: Vec<usize> = corners
            .iter()
            .map(|&idx| {
                let abs = if idx > 0 { idx - 1 } else { seen as i64 + idx };
                if abs < 0 || abs as usize >= count {
                    Err(GeometryError::IndexOutOfRange { line, index: idx, count })
                } else {
                    Ok(abs as usize)
                }
            })
            .collect::<Result<_, _>>()?;
        for k in 1..resolved.len() - 1 {
            triangles.push([resolved[0], resolved[k], resolved[k + 1]]);
        }
    }
    if triangles.is_empty() {
        return Err(GeometryError::NoFaces);
    }
    Ok(Mesh {
        name: name.into(),
        vertices,
        triangles,
    })
}

fn malformed(line: usize, kind: &'static str, text: &str) -> GeometryError {
    GeometryError::Malformed {
        line,
        kind,
        text: text.trim().to_string(),
    }
}

/// Uniformly scales and translates the mesh so its bounding box is centered
/// at the origin and its longest side spans `1 - padding`.
pub fn normalize_mesh(mesh: &Mesh, padding: f64) -> Result<Mesh, GeometryError> {
    if !(0.0..1.0).contains(&padding) {
        return Err(GeometryError::BadPadding(padding));
    }
    let bb = mesh.bounds().ok_or(GeometryError::Degenerate)?;
    let extent = bb.max_extent();
    if !(extent > 0.0) {
        return Err(GeometryError::Degenerate);
    }
    let scale = (1.0 - padding) / extent;
    let c = bb.center();
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| {
            [
                (v[0] - c[0]) * scale,
                (v[1] - c[1]) * scale,
                (v[2] - c[2]) * scale,
            ]
        })
        .collect();
    Ok(Mesh {
        name: mesh.name.clone(),
        vertices,
        triangles: mesh.triangles.clone(),
    })
}

/// Default padding used when framing meshes for voxelization.
pub const DEFAULT_PADDING: f64 = 0.05;

/// Axis-aligned box mesh (12 triangles) spanning `min..max`.
pub fn box_mesh(name: &str, min: [f64; 3], max: [f64; 3]) -> Mesh {
    let mut vertices = Vec::with_capacity(8);
    for i in 0..8 {
        vertices.push([
            if i & 1 == 0 { min[0] } else { max[0] },
            if i & 2 == 0 { min[1] } else { max[1] },
            if i & 4 == 0 { min[2] } else { max[2] },
        ]);
    }
    let quads = [
        [0, 2, 3, 1],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 4, 6, 2],
        [1, 3, 7, 5],
    ];
    let mut triangles = Vec::with_capacity(12);
    for q in quads {
        triangles.push([q[0], q[1], q[2]]);
        triangles.push([q[0], q[2], q[3]]);
    }
    Mesh {
        name: name.to_string(),
        vertices,
        triangles,
    }
}
