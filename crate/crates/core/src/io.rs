//! File formats.
//!
//! Everything numeric round-trips bitwise:
//! - Mesh: plain text, sectioned (`vertices`, `normals`, `uvs`, `triangles`),
//!   whitespace-separated decimals printed in shortest round-trip form.
//! - Float rasters: binary, 16-byte header (magic `FRS1`, u32 LE width,
//!   height, channels) followed by row-major little-endian f64 samples,
//!   channel-interleaved.
//! - Parametric model (`MVFM1`) and fit state (`MVFS1`): text header with
//!   dimensions and seed, a `BINARY` marker line, then little-endian f64
//!   arrays in the documented order.
//! - Landmarks: text lines `view vertex_index pixel_x pixel_y`.
//! - Images: 8-bit RGB PNG; quantized channel values round-trip exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write as IoWrite};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use crate::facemodel::{FitCoefficients, ParametricModel};
use crate::fitting::FitState;
use crate::geom::{ImageBuf, Mesh, RigidPose, UvRaster};
use crate::shading::{ShLighting, SH_COUNT};
use crate::{Error, Result};

const RASTER_MAGIC: &[u8; 4] = b"FRS1";

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

// ---------------------------------------------------------------------------
// Mesh text format
// ---------------------------------------------------------------------------

pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "MESH").map_err(io_err)?;
    writeln!(w, "vertices {}", mesh.vertices.len()).map_err(io_err)?;
    for v in &mesh.vertices {
        writeln!(w, "{} {} {}", v.x, v.y, v.z).map_err(io_err)?;
    }
    writeln!(w, "normals {}", mesh.normals.len()).map_err(io_err)?;
    for n in &mesh.normals {
        writeln!(w, "{} {} {}", n.x, n.y, n.z).map_err(io_err)?;
    }
    writeln!(w, "uvs {}", mesh.uvs.len()).map_err(io_err)?;
    for uv in &mesh.uvs {
        writeln!(w, "{} {}", uv.x, uv.y).map_err(io_err)?;
    }
    writeln!(w, "triangles {}", mesh.triangles.len()).map_err(io_err)?;
    for t in &mesh.triangles {
        writeln!(w, "{} {} {}", t[0], t[1], t[2]).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

struct LineScanner<'a> {
    lines: std::io::Lines<BufReader<File>>,
    path: &'a Path,
    lineno: usize,
}

impl<'a> LineScanner<'a> {
    fn new(reader: BufReader<File>, path: &'a Path) -> Self {
        LineScanner {
            lines: reader.lines(),
            path,
            lineno: 0,
        }
    }

    fn next_line(&mut self) -> Result<String> {
        self.lineno += 1;
        match self.lines.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::io(self.path, e)),
            None => Err(Error::parse(
                self.path,
                format!("unexpected end of file at line {}", self.lineno),
            )),
        }
    }

    fn parse_err(&self, message: impl Into<String>) -> Error {
        Error::parse(
            self.path,
            format!("line {}: {}", self.lineno, message.into()),
        )
    }

    fn section(&mut self, name: &str) -> Result<usize> {
        let line = self.next_line()?;
        let mut it = line.split_whitespace();
        match (it.next(), it.next()) {
            (Some(tag), Some(count)) if tag == name => count
                .parse()
                .map_err(|_| self.parse_err(format!("bad {name} count '{count}'"))),
            _ => Err(self.parse_err(format!("expected '{name} <count>', got '{line}'"))),
        }
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let line = self.next_line()?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.parse_err(format!("bad float data '{line}'")))?;
        if vals.len() != n {
            return Err(self.parse_err(format!("expected {n} fields, got {}", vals.len())));
        }
        Ok(vals)
    }
}

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let mut scan = LineScanner::new(open_reader(path)?, path);
    let magic = scan.next_line()?;
    if magic.trim() != "MESH" {
        return Err(scan.parse_err("missing MESH magic"));
    }
    let nv = scan.section("vertices")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let v = scan.floats(3)?;
        vertices.push(Vector3::new(v[0], v[1], v[2]));
    }
    let nn = scan.section("normals")?;
    let mut normals = Vec::with_capacity(nn);
    for _ in 0..nn {
        let v = scan.floats(3)?;
        normals.push(Vector3::new(v[0], v[1], v[2]));
    }
    let nu = scan.section("uvs")?;
    let mut uvs = Vec::with_capacity(nu);
    for _ in 0..nu {
        let v = scan.floats(2)?;
        uvs.push(Vector2::new(v[0], v[1]));
    }
    let nt = scan.section("triangles")?;
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let line = scan.next_line()?;
        let idx: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| scan.parse_err(format!("bad triangle '{line}'")))?;
        if idx.len() != 3 {
            return Err(scan.parse_err("triangle needs 3 indices"));
        }
        triangles.push([idx[0], idx[1], idx[2]]);
    }
    let mesh = Mesh {
        vertices,
        normals,
        uvs,
        triangles,
    };
    mesh.validate()?;
    Ok(mesh)
}

// ---------------------------------------------------------------------------
// Binary float rasters
// ---------------------------------------------------------------------------

fn write_raster_header(w: &mut impl IoWrite, width: u32, height: u32, channels: u32) -> std::io::Result<()> {
    w.write_all(RASTER_MAGIC)?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&height.to_le_bytes())?;
    w.write_all(&channels.to_le_bytes())
}

fn read_raster_header(r: &mut impl Read, path: &Path) -> Result<(u32, u32, u32)> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..4] != RASTER_MAGIC {
        return Err(Error::parse(path, "missing FRS1 magic"));
    }
    let word = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    Ok((word(4), word(8), word(12)))
}

pub fn save_scalar_raster(map: &UvRaster<f64>, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    write_raster_header(&mut w, map.width, map.height, 1).map_err(|e| Error::io(path, e))?;
    for v in &map.data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_scalar_raster(path: &Path) -> Result<UvRaster<f64>> {
    let mut r = open_reader(path)?;
    let (width, height, channels) = read_raster_header(&mut r, path)?;
    if channels != 1 {
        return Err(Error::parse(
            path,
            format!("expected 1 channel, file has {channels}"),
        ));
    }
    let data = read_f64s(&mut r, (width * height) as usize, path)?;
    Ok(UvRaster {
        width,
        height,
        data,
    })
}

pub fn save_vector_raster(map: &UvRaster<Vector3<f64>>, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    write_raster_header(&mut w, map.width, map.height, 3).map_err(|e| Error::io(path, e))?;
    for v in &map.data {
        for c in 0..3 {
            w.write_all(&v[c].to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_vector_raster(path: &Path) -> Result<UvRaster<Vector3<f64>>> {
    let mut r = open_reader(path)?;
    let (width, height, channels) = read_raster_header(&mut r, path)?;
    if channels != 3 {
        return Err(Error::parse(
            path,
            format!("expected 3 channels, file has {channels}"),
        ));
    }
    let flat = read_f64s(&mut r, (width * height * 3) as usize, path)?;
    let data = flat
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();
    Ok(UvRaster {
        width,
        height,
        data,
    })
}

fn read_f64s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_f64s(w: &mut impl IoWrite, vals: impl Iterator<Item = f64>, path: &Path) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parametric model container (MVFM1)
// ---------------------------------------------------------------------------

/// Binary array order after the header: mean_shape (3z), mean_albedo (3z),
/// basis_id (3z*k_id, column-major), basis_exp, basis_alb, sigma_id,
/// sigma_exp, sigma_alb, uvs (2z), then triangle indices as u32 LE.
pub fn save_model(model: &ParametricModel, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "MVFM1").map_err(io_err)?;
    writeln!(w, "seed {}", model.seed).map_err(io_err)?;
    writeln!(w, "vertices {}", model.num_vertices()).map_err(io_err)?;
    writeln!(
        w,
        "bases {} {} {}",
        model.k_id(),
        model.k_exp(),
        model.k_alb()
    )
    .map_err(io_err)?;
    writeln!(w, "triangles {}", model.triangles.len()).map_err(io_err)?;
    writeln!(w, "BINARY").map_err(io_err)?;
    write_f64s(&mut w, model.mean_shape.iter().copied(), path)?;
    write_f64s(&mut w, model.mean_albedo.iter().copied(), path)?;
    for basis in [&model.basis_id, &model.basis_exp, &model.basis_alb] {
        write_f64s(&mut w, basis.iter().copied(), path)?; // column-major
    }
    for sigma in [&model.sigma_id, &model.sigma_exp, &model.sigma_alb] {
        write_f64s(&mut w, sigma.iter().copied(), path)?;
    }
    write_f64s(
        &mut w,
        model.uvs.iter().flat_map(|uv| [uv.x, uv.y]),
        path,
    )?;
    for t in &model.triangles {
        for &i in t {
            w.write_all(&i.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_model(path: &Path) -> Result<ParametricModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    // Read header lines up to and including the BINARY marker.
    let mut lines = Vec::new();
    loop {
        header.clear();
        let n = r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::parse(path, "missing BINARY marker"));
        }
        let line = header.trim().to_string();
        if line == "BINARY" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some("MVFM1") {
        return Err(Error::parse(path, "missing MVFM1 magic"));
    }
    let field = |prefix: &str| -> Result<Vec<u64>> {
        lines
            .iter()
            .find_map(|l| l.strip_prefix(prefix))
            .ok_or_else(|| Error::parse(path, format!("missing '{}' header line", prefix.trim())))?
            .split_whitespace()
            .map(|t| {
                t.parse::<u64>()
                    .map_err(|_| Error::parse(path, format!("bad integer in '{}' line", prefix.trim())))
            })
            .collect()
    };
    let seed = field("seed ")?[0];
    let z = field("vertices ")?[0] as usize;
    let bases = field("bases ")?;
    let (k_id, k_exp, k_alb) = (bases[0] as usize, bases[1] as usize, bases[2] as usize);
    let n_tris = field("triangles ")?[0] as usize;

    let mean_shape = DVector::from_vec(read_f64s(&mut r, 3 * z, path)?);
    let mean_albedo = DVector::from_vec(read_f64s(&mut r, 3 * z, path)?);
    let read_basis = |k: usize, r: &mut BufReader<File>| -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_vec(3 * z, k, read_f64s(r, 3 * z * k, path)?))
    };
    let basis_id = read_basis(k_id, &mut r)?;
    let basis_exp = read_basis(k_exp, &mut r)?;
    let basis_alb = read_basis(k_alb, &mut r)?;
    let sigma_id = DVector::from_vec(read_f64s(&mut r, k_id, path)?);
    let sigma_exp = DVector::from_vec(read_f64s(&mut r, k_exp, path)?);
    let sigma_alb = DVector::from_vec(read_f64s(&mut r, k_alb, path)?);
    let uv_flat = read_f64s(&mut r, 2 * z, path)?;
    let uvs = uv_flat
        .chunks_exact(2)
        .map(|c| Vector2::new(c[0], c[1]))
        .collect();
    let mut tri_bytes = vec![0u8; n_tris * 12];
    r.read_exact(&mut tri_bytes).map_err(|e| Error::io(path, e))?;
    let triangles = tri_bytes
        .chunks_exact(12)
        .map(|c| {
            [
                u32::from_le_bytes(c[0..4].try_into().unwrap()),
                u32::from_le_bytes(c[4..8].try_into().unwrap()),
                u32::from_le_bytes(c[8..12].try_into().unwrap()),
            ]
        })
        .collect();
    let model = ParametricModel {
        mean_shape,
        mean_albedo,
        basis_id,
        basis_exp,
        basis_alb,
        sigma_id,
        sigma_exp,
        sigma_alb,
        triangles,
        uvs,
        seed,
    };
    model.validate()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Fit state (MVFS1)
// ---------------------------------------------------------------------------

/// Binary array order: x_id, x_exp, x_alb, rotation (9, row-major),
/// translation (3), scale (1), SH coefficients (27, channel-major),
/// ambient (3).
pub fn save_fit_state(state: &FitState, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "MVFS1").map_err(io_err)?;
    writeln!(
        w,
        "bases {} {} {}",
        state.coeffs.x_id.len(),
        state.coeffs.x_exp.len(),
        state.coeffs.x_alb.len()
    )
    .map_err(io_err)?;
    writeln!(w, "BINARY").map_err(io_err)?;
    write_f64s(&mut w, state.coeffs.x_id.iter().copied(), path)?;
    write_f64s(&mut w, state.coeffs.x_exp.iter().copied(), path)?;
    write_f64s(&mut w, state.coeffs.x_alb.iter().copied(), path)?;
    let rot = state.pose.rotation;
    write_f64s(&mut w, (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| rot[(r, c)]), path)?;
    write_f64s(&mut w, state.pose.translation.iter().copied(), path)?;
    write_f64s(&mut w, std::iter::once(state.pose.scale), path)?;
    for c in 0..3 {
        write_f64s(&mut w, state.lighting.coeffs[c].iter().copied(), path)?;
    }
    write_f64s(&mut w, state.lighting.ambient.iter().copied(), path)?;
    w.flush().map_err(io_err)
}

pub fn load_fit_state(path: &Path) -> Result<FitState> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim() != "MVFS1" {
        return Err(Error::parse(path, "missing MVFS1 magic"));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let dims: Vec<usize> = line
        .trim()
        .strip_prefix("bases ")
        .ok_or_else(|| Error::parse(path, "missing 'bases' header line"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(path, "bad basis dims")))
        .collect::<Result<_>>()?;
    line.clear();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim() != "BINARY" {
        return Err(Error::parse(path, "missing BINARY marker"));
    }
    let x_id = DVector::from_vec(read_f64s(&mut r, dims[0], path)?);
    let x_exp = DVector::from_vec(read_f64s(&mut r, dims[1], path)?);
    let x_alb = DVector::from_vec(read_f64s(&mut r, dims[2], path)?);
    let rot = read_f64s(&mut r, 9, path)?;
    let t = read_f64s(&mut r, 3, path)?;
    let s = read_f64s(&mut r, 1, path)?[0];
    let mut lighting = ShLighting::zero();
    for c in 0..3 {
        let coeffs = read_f64s(&mut r, SH_COUNT, path)?;
        lighting.coeffs[c].copy_from_slice(&coeffs);
    }
    let amb = read_f64s(&mut r, 3, path)?;
    lighting.ambient = Vector3::new(amb[0], amb[1], amb[2]);
    let pose = RigidPose {
        rotation: Matrix3::from_row_slice(&rot),
        translation: Vector3::new(t[0], t[1], t[2]),
        scale: s,
    };
    Ok(FitState {
        coeffs: FitCoefficients {
            x_id,
            x_exp,
            x_alb,
        },
        pose,
        lighting,
    })
}

// ---------------------------------------------------------------------------
// Landmarks
// ---------------------------------------------------------------------------

/// One observed landmark: the pixel position of a designated model vertex in
/// one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkObservation {
    pub view: u32,
    pub vertex: u32,
    pub pixel: Vector2<f64>,
}

pub fn save_landmarks(obs: &[LandmarkObservation], path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "LANDMARKS {}", obs.len()).map_err(io_err)?;
    for o in obs {
        writeln!(w, "{} {} {} {}", o.view, o.vertex, o.pixel.x, o.pixel.y).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

// ---------------------------------------------------------------------------
// Lighting
// ---------------------------------------------------------------------------

/// Writes lighting as text: one `sh` line of 9 coefficients per channel and
/// one `ambient` line. Shortest round-trip decimals, so reloading is exact.
pub fn save_lighting(lighting: &ShLighting, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "LIGHTING {}", SH_COUNT).map_err(io_err)?;
    for c in 0..3 {
        let row: Vec<String> = lighting.coeffs[c].iter().map(|v| v.to_string()).collect();
        writeln!(w, "sh {}", row.join(" ")).map_err(io_err)?;
    }
    writeln!(
        w,
        "ambient {} {} {}",
        lighting.ambient.x, lighting.ambient.y, lighting.ambient.z
    )
    .map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_lighting(path: &Path) -> Result<ShLighting> {
    let mut scan = LineScanner::new(open_reader(path)?, path);
    let n = scan.section("LIGHTING")?;
    if n != SH_COUNT {
        return Err(scan.parse_err("unexpected coefficient count"));
    }
    let mut lighting = ShLighting::zero();
    for c in 0..3 {
        let line = scan.next_line()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != SH_COUNT + 1 || fields[0] != "sh" {
            return Err(scan.parse_err("expected an `sh` line with 9 coefficients"));
        }
        for (k, f) in fields[1..].iter().enumerate() {
            lighting.coeffs[c][k] = f
                .parse()
                .map_err(|_| scan.parse_err("bad sh coefficient"))?;
        }
    }
    let line = scan.next_line()?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "ambient" {
        return Err(scan.parse_err("expected an `ambient` line with 3 values"));
    }
    for c in 0..3 {
        lighting.ambient[c] = fields[1 + c]
            .parse()
            .map_err(|_| scan.parse_err("bad ambient value"))?;
    }
    Ok(lighting)
}

// ---------------------------------------------------------------------------
// 8-bit PNG images
// ---------------------------------------------------------------------------

/// Writes an image as 8-bit RGB PNG. Channels are rounded to the nearest
/// integer and clamped to `[0, 255]`, so images that already hold quantized
/// values round-trip exactly through [`load_image_png`].
pub fn save_image_png(img: &ImageBuf, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.data.len() * 3);
    for px in &img.data {
        for c in 0..3 {
            bytes.push(px[c].round().clamp(0.0, 255.0) as u8);
        }
    }
    let buf: image::RgbImage = image::ImageBuffer::from_raw(img.width, img.height, bytes)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::parse(path, other.to_string()),
        })
}

/// Reads an 8-bit RGB PNG into float channels in `[0, 255]`.
pub fn load_image_png(path: &Path) -> Result<ImageBuf> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .into_rgb8();
    let (width, height) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| Vector3::new(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64))
        .collect();
    Ok(ImageBuf {
        width,
        height,
        data,
    })
}

pub fn load_landmarks(path: &Path) -> Result<Vec<LandmarkObservation>> {
    let mut scan = LineScanner::new(open_reader(path)?, path);
    let n = scan.section("LANDMARKS")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let line = scan.next_line()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(scan.parse_err("landmark line needs 4 fields"));
        }
        let view = fields[0]
            .parse()
            .map_err(|_| scan.parse_err("bad view index"))?;
        let vertex = fields[1]
            .parse()
            .map_err(|_| scan.parse_err("bad vertex index"))?;
        let x = fields[2].parse().map_err(|_| scan.parse_err("bad x"))?;
        let y = fields[3].parse().map_err(|_| scan.parse_err("bad y"))?;
        out.push(LandmarkObservation {
            view,
            vertex,
            pixel: Vector2::new(x, y),
        });
    }
    Ok(out)
}
