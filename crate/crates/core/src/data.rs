//! Synthetic shape scenes with exact ground-truth masks, PPM/PGM file
//! I/O, and the variable-length token bitstream codec.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMG: usize = 32;
pub const CHANNELS: usize = 3;

/// The four shape classes used for labels and the linear probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeType {
    Rect,
    Circle,
    Triangle,
    Cross,
}

pub const SHAPE_CLASSES: usize = 4;

impl ShapeType {
    pub fn from_class(c: usize) -> ShapeType {
        match c % SHAPE_CLASSES {
            0 => ShapeType::Rect,
            1 => ShapeType::Circle,
            2 => ShapeType::Triangle,
            _ => ShapeType::Cross,
        }
    }

    pub fn class(self) -> usize {
        match self {
            ShapeType::Rect => 0,
            ShapeType::Circle => 1,
            ShapeType::Triangle => 2,
            ShapeType::Cross => 3,
        }
    }
}

/// One synthetic scene: image, disjoint instance masks, dominant-shape
/// class label, and the complexity knob `s` (shape count).
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeScene {
    /// `[32, 32, 3]` pixels in `[0,1]`, quantized to 8-bit resolution.
    pub image: Tensor,
    /// Per-instance binary masks, row-major 32x32, pairwise disjoint.
    pub masks: Vec<Vec<bool>>,
    /// Class of the dominant (largest visible area) shape.
    pub label: usize,
    /// Number of shapes.
    pub complexity: usize,
}

fn quantize8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn shape_mask(kind: ShapeType, cx: i32, cy: i32, size: i32) -> Vec<bool> {
    let mut m = vec![false; IMG * IMG];
    for y in 0..IMG as i32 {
        for x in 0..IMG as i32 {
            let (dx, dy) = (x - cx, y - cy);
            let inside = match kind {
                ShapeType::Rect => dx.abs() <= size && dy.abs() <= size,
                ShapeType::Circle => dx * dx + dy * dy <= size * size,
                // isoceles triangle, apex up
                ShapeType::Triangle => {
                    dy >= -size && dy <= size && dx.abs() * 2 <= dy + size
                }
                ShapeType::Cross => {
                    let bar = (size / 2).max(1);
                    (dx.abs() <= bar && dy.abs() <= size)
                        || (dy.abs() <= bar && dx.abs() <= size)
                }
            };
            if inside {
                m[(y * IMG as i32 + x) as usize] = true;
            }
        }
    }
    m
}

/// Deterministic scene generation: `s` shapes per scene drawn uniformly
/// from `complexity_range`, the first (primary) shape large and of a
/// uniformly chosen class, the rest smaller. Later shapes paint over
/// earlier ones; masks record visible pixels only, so they stay
/// disjoint. Labels are the dominant visible class.
pub fn gen_shapes(n: usize, seed: u64, complexity_range: (usize, usize)) -> Result<Vec<ShapeScene>> {
    let (lo, hi) = complexity_range;
    if n < 1 {
        return Err(Error::InvalidArgument("gen_shapes needs n >= 1".into()));
    }
    if lo < 1 || hi < lo || hi > 6 {
        return Err(Error::InvalidArgument(format!(
            "complexity range [{lo},{hi}] outside [1,6]"
        )));
    }
    let mut rng = Rng::new(seed ^ 0x5ca1_ab1e);
    let mut scenes = Vec::with_capacity(n);
    for _ in 0..n {
        let s = lo + rng.below(hi - lo + 1);
        // textured background
        let base: Vec<f32> = (0..3).map(|_| 0.05 + 0.20 * rng.next_f32()).collect();
        let mut image = vec![0.0f32; IMG * IMG * CHANNELS];
        for p in 0..IMG * IMG {
            for c in 0..CHANNELS {
                image[p * CHANNELS + c] = quantize8(base[c] + 0.04 * (rng.next_f32() - 0.5));
            }
        }
        let primary_class = rng.below(SHAPE_CLASSES);
        let mut kinds = Vec::with_capacity(s);
        let mut masks: Vec<Vec<bool>> = Vec::with_capacity(s);
        for k in 0..s {
            let kind = if k == 0 {
                ShapeType::from_class(primary_class)
            } else {
                ShapeType::from_class(rng.below(SHAPE_CLASSES))
            };
            let size = if k == 0 { 9 + rng.below(4) as i32 } else { 3 + rng.below(4) as i32 };
            let cx = (size + rng.below((IMG as i32 - 2 * size).max(1) as usize) as i32).min(31);
            let cy = (size + rng.below((IMG as i32 - 2 * size).max(1) as usize) as i32).min(31);
            let mask = shape_mask(kind, cx, cy, size);
            let color: Vec<f32> = (0..3).map(|_| 0.35 + 0.65 * rng.next_f32()).collect();
            for p in 0..IMG * IMG {
                if mask[p] {
                    for c in 0..CHANNELS {
                        image[p * CHANNELS + c] = quantize8(color[c]);
                    }
                    // later shapes occlude earlier ones
                    for prev in masks.iter_mut() {
                        prev[p] = false;
                    }
                }
            }
            kinds.push(kind);
            masks.push(mask);
        }
        // dominant visible class
        let mut area = [0usize; SHAPE_CLASSES];
        for (kind, mask) in kinds.iter().zip(&masks) {
            area[kind.class()] += mask.iter().filter(|&&b| b).count();
        }
        let label = (0..SHAPE_CLASSES).max_by_key(|&c| area[c]).unwrap();
        scenes.push(ShapeScene {
            image: Tensor::new(vec![IMG, IMG, CHANNELS], image)?,
            masks,
            label,
            complexity: s,
        });
    }
    Ok(scenes)
}

// ── PPM / PGM ───────────────────────────────────────────────────────

/// Serialize an `[h, w, 3]` image in `[0,1]` as binary P6, maxval 255.
pub fn write_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Dimension(format!("write_ppm wants [h,w,3], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn parse_header_fields(bytes: &[u8], start: usize, n: usize) -> Result<(Vec<usize>, usize)> {
    let mut fields = Vec::with_capacity(n);
    let mut i = start;
    while fields.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let s = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i == s {
            return Err(Error::Format("malformed netpbm header".into()));
        }
        let text = std::str::from_utf8(&bytes[s..i]).expect("digits are ascii");
        fields.push(text.parse().map_err(|_| Error::Format("bad header number".into()))?);
    }
    // single whitespace separates header from payload
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::Format("missing header/payload separator".into()));
    }
    Ok((fields, i + 1))
}

/// Parse a binary P6 image into `[h, w, 3]` in `[0,1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(b"P3") {
        return Err(Error::Format("ASCII PPM (P3) is unsupported; use binary P6".into()));
    }
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format("not a P6 PPM file".into()));
    }
    let (fields, payload) = parse_header_fields(bytes, 2, 3)?;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let need = w * h * 3;
    let data = &bytes[payload..];
    if data.len() < need {
        return Err(Error::Format(format!(
            "truncated payload: need {need} bytes, have {}",
            data.len()
        )));
    }
    let pixels: Vec<f32> = data[..need].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![h, w, 3], pixels)
}

/// Serialize a grayscale `[h, w]` byte grid as binary P5.
pub fn write_pgm(values: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    if values.len() != w * h {
        return Err(Error::Dimension(format!("{} values for {w}x{h} PGM", values.len())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(values);
    Ok(out)
}

/// Parse a binary P5 grayscale image.
pub fn read_pgm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::Format("not a P5 PGM file".into()));
    }
    let (fields, payload) = parse_header_fields(bytes, 2, 3)?;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let need = w * h;
    let data = &bytes[payload..];
    if data.len() < need {
        return Err(Error::Format("truncated PGM payload".into()));
    }
    Ok((data[..need].to_vec(), w, h))
}

// ── dataset directory ───────────────────────────────────────────────

/// Write scenes as PPM images, instance-id PGM masks, and a labels CSV.
pub fn write_dataset(dir: &Path, scenes: &[ShapeScene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut labels = String::from("id,label,shapes\n");
    for (i, scene) in scenes.iter().enumerate() {
        std::fs::write(dir.join(format!("scene_{i:04}.ppm")), write_ppm(&scene.image)?)?;
        let mut ids = vec![0u8; IMG * IMG];
        for (k, mask) in scene.masks.iter().enumerate() {
            for (p, &b) in mask.iter().enumerate() {
                if b {
                    ids[p] = (k + 1) as u8;
                }
            }
        }
        std::fs::write(
            dir.join(format!("scene_{i:04}_masks.pgm")),
            write_pgm(&ids, IMG, IMG)?,
        )?;
        labels.push_str(&format!("{i},{},{}\n", scene.label, scene.complexity));
    }
    let mut f = std::fs::File::create(dir.join("labels.csv"))?;
    f.write_all(labels.as_bytes())?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<ShapeScene>> {
    let labels = std::fs::read_to_string(dir.join("labels.csv"))?;
    let mut scenes = Vec::new();
    for line in labels.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("bad labels.csv line: {line}")));
        }
        let parse = |s: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Format(format!("bad labels.csv line: {line}")))
        };
        let (id, label, shapes) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
        let image = read_ppm(&std::fs::read(dir.join(format!("scene_{id:04}.ppm")))?)?;
        let (ids, w, h) = read_pgm(&std::fs::read(dir.join(format!("scene_{id:04}_masks.pgm")))?)?;
        if (w, h) != (IMG, IMG) {
            return Err(Error::Format(format!("mask grid {w}x{h} is not {IMG}x{IMG}")));
        }
        let mut masks = vec![vec![false; IMG * IMG]; shapes];
        for (p, &v) in ids.iter().enumerate() {
            if v as usize > shapes {
                return Err(Error::Format(format!("instance id {v} > shape count {shapes}")));
            }
            if v > 0 {
                masks[v as usize - 1][p] = true;
            }
        }
        scenes.push(ShapeScene { image, masks, label, complexity: shapes });
    }
    if scenes.is_empty() {
        return Err(Error::Format(format!("no scenes found in {}", dir.display())));
    }
    Ok(scenes)
}

// ── token bitstream ─────────────────────────────────────────────────

const BITSTREAM_MAGIC: &[u8; 4] = b"ALTB";
const BITSTREAM_VERSION: u32 = 1;

/// Bits per index for a codebook of size `k`.
pub fn bits_per_index(k: usize) -> Result<u32> {
    if !(2..=65536).contains(&k) {
        return Err(Error::InvalidArgument(format!("codebook size {k} outside 2..=65536")));
    }
    Ok((k as u64 - 1).ilog2() + 1)
}

/// Pack latent indices at `ceil(log2 k)` bits each, big-endian within
/// bytes, zero-padded tail, behind a fixed header.
pub fn encode_bitstream(indices: &[usize], k: usize) -> Result<Vec<u8>> {
    let bits = bits_per_index(k)?;
    for &i in indices {
        if i >= k {
            return Err(Error::IndexOutOfRange { context: "encode_bitstream", index: i, limit: k });
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(BITSTREAM_MAGIC);
    out.extend_from_slice(&BITSTREAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(indices.len() as u32).to_le_bytes());
    let mut acc: u64 = 0;
    let mut nbits: u32 = 0;
    for &i in indices {
        acc = (acc << bits) | i as u64;
        nbits += bits;
        while nbits >= 8 {
            nbits -= 8;
            out.push((acc >> nbits) as u8);
        }
    }
    if nbits > 0 {
        out.push(((acc << (8 - nbits)) & 0xff) as u8);
    }
    Ok(out)
}

/// Payload bytes (excluding the header) for `m` indices at size-`k`.
pub fn payload_bytes(m: usize, k: usize) -> Result<usize> {
    Ok((m * bits_per_index(k)? as usize).div_ceil(8))
}

/// Inverse of [`encode_bitstream`]; validates header, payload length,
/// index range, and that tail padding bits are zero.
pub fn decode_bitstream(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 16 {
        return Err(Error::Format("bitstream shorter than its header".into()));
    }
    if &bytes[0..4] != BITSTREAM_MAGIC {
        return Err(Error::Format("bad bitstream magic".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("length checked"));
    if word(4) != BITSTREAM_VERSION {
        return Err(Error::Format(format!("unsupported bitstream version {}", word(4))));
    }
    let k = word(8) as usize;
    let m = word(12) as usize;
    let bits = bits_per_index(k)?;
    let payload = &bytes[16..];
    let need = (m * bits as usize).div_ceil(8);
    if payload.len() != need {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {need}",
            payload.len()
        )));
    }
    let mut indices = Vec::with_capacity(m);
    let mut acc: u64 = 0;
    let mut nbits: u32 = 0;
    let mut pos = 0usize;
    for _ in 0..m {
        while nbits < bits {
            acc = (acc << 8) | payload[pos] as u64;
            pos += 1;
            nbits += 8;
        }
        nbits -= bits;
        let idx = ((acc >> nbits) & ((1u64 << bits) - 1)) as usize;
        if idx >= k {
            return Err(Error::Format(format!("decoded index {idx} >= codebook size {k}")));
        }
        indices.push(idx);
    }
    if acc & ((1u64 << nbits) - 1) != 0 {
        return Err(Error::Format("nonzero padding bits in bitstream tail".into()));
    }
    Ok((indices, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_is_deterministic() {
        let a = gen_shapes(10, 7, (1, 6)).unwrap();
        let b = gen_shapes(10, 7, (1, 6)).unwrap();
        assert_eq!(a, b);
        let c = gen_shapes(10, 8, (1, 6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn complexity_range_respected() {
        for scene in gen_shapes(20, 1, (1, 1)).unwrap() {
            assert_eq!(scene.masks.len(), 1);
            assert_eq!(scene.complexity, 1);
        }
        assert!(gen_shapes(1, 1, (0, 3)).is_err());
        assert!(gen_shapes(1, 1, (3, 2)).is_err());
        assert!(gen_shapes(0, 1, (1, 2)).is_err());
    }

    #[test]
    fn masks_are_disjoint_and_labels_near_uniform() {
        let scenes = gen_shapes(1000, 3, (1, 6)).unwrap();
        let mut counts = [0usize; SHAPE_CLASSES];
        for scene in &scenes {
            counts[scene.label] += 1;
            let mut seen = vec![false; IMG * IMG];
            for mask in &scene.masks {
                for (p, &b) in mask.iter().enumerate() {
                    if b {
                        assert!(!seen[p], "masks overlap");
                        seen[p] = true;
                    }
                }
            }
            assert!(scene.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        for &c in &counts {
            let frac = c as f64 / 1000.0;
            assert!((frac - 0.25).abs() < 0.10, "class fraction {frac} not within ±10% of 1/4");
        }
    }

    #[test]
    fn ppm_roundtrip_exact_at_8bit() {
        let scene = &gen_shapes(1, 5, (2, 3)).unwrap()[0];
        // generator quantizes to 8-bit, so the roundtrip is bit-exact
        let bytes = write_ppm(&scene.image).unwrap();
        let back = read_ppm(&bytes).unwrap();
        assert_eq!(back, scene.image);
        // arbitrary image: error bounded by quantization
        let mut rng = Rng::new(9);
        let im = {
            let mut t = Tensor::randn(vec![8, 8, 3], 0.3, &mut rng);
            for v in t.data_mut() {
                *v = (*v + 0.5).clamp(0.0, 1.0);
            }
            t
        };
        let back = read_ppm(&write_ppm(&im).unwrap()).unwrap();
        assert!(back.max_abs_diff(&im) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn ppm_error_cases() {
        assert!(matches!(read_ppm(b"P3\n2 2\n255\n"), Err(Error::Format(m)) if m.contains("P3")));
        assert!(read_ppm(b"P7 whatever").is_err());
        // truncated payload
        let mut bytes = write_ppm(&Tensor::zeros(vec![4, 4, 3])).unwrap();
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(read_ppm(&bytes), Err(Error::Format(m)) if m.contains("truncated")));
    }

    #[test]
    fn pgm_roundtrip() {
        let vals: Vec<u8> = (0..64).collect();
        let bytes = write_pgm(&vals, 8, 8).unwrap();
        let (back, w, h) = read_pgm(&bytes).unwrap();
        assert_eq!((back, w, h), (vals, 8, 8));
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = gen_shapes(5, 11, (1, 4)).unwrap();
        write_dataset(dir.path(), &scenes).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, scenes);
    }

    #[test]
    fn bitstream_paper_accounting() {
        // 32 indices for a 4096-entry codebook: 32 x 12 bits = 48 bytes
        let indices: Vec<usize> = (0..32).map(|i| (i * 127) % 4096).collect();
        let bytes = encode_bitstream(&indices, 4096).unwrap();
        assert_eq!(bytes.len() - 16, 48);
        assert_eq!(payload_bytes(32, 4096).unwrap(), 48);
        // desk max: K=256, m=64 → 64 bytes
        assert_eq!(payload_bytes(64, 256).unwrap(), 64);
        let (back, k) = decode_bitstream(&bytes).unwrap();
        assert_eq!((back, k), (indices, 4096));
    }

    #[test]
    fn bitstream_random_roundtrips() {
        let mut rng = Rng::new(13);
        for _ in 0..1000 {
            let k = 2 + rng.below(65535);
            let m = 1 + rng.below(80);
            let indices: Vec<usize> = (0..m).map(|_| rng.below(k)).collect();
            let bytes = encode_bitstream(&indices, k).unwrap();
            let (back, kk) = decode_bitstream(&bytes).unwrap();
            assert_eq!((back, kk), (indices, k));
        }
    }

    #[test]
    fn bitstream_error_cases() {
        assert!(encode_bitstream(&[4], 4).is_err()); // index >= K
        assert!(encode_bitstream(&[0], 1).is_err()); // K too small
        assert!(encode_bitstream(&[0], 70000).is_err());
        let good = encode_bitstream(&[1, 2, 3], 8).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_bitstream(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 99; // version
        assert!(decode_bitstream(&bad).is_err());
        let mut bad = good.clone();
        bad.pop();
        assert!(decode_bitstream(&bad).is_err());
        // nonzero padding: 3 indices x 3 bits = 9 bits → 7 pad bits
        let mut bad = good;
        let last = bad.len() - 1;
        bad[last] |= 0x01;
        assert!(matches!(decode_bitstream(&bad), Err(Error::Format(m)) if m.contains("padding")));
    }

    #[test]
    fn bitstream_boundary_codebooks() {
        for k in [2usize, 3, 255, 256, 257, 65535, 65536] {
            let indices = vec![0, 1, k - 1, k / 2];
            let bytes = encode_bitstream(&indices, k).unwrap();
            let (back, kk) = decode_bitstream(&bytes).unwrap();
            assert_eq!((back, kk), (indices, k), "k = {k}");
        }
    }
}
