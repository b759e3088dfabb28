//! Binary codes for the compact-representation evaluation: PCA projection
//! followed by an orthogonal rotation learned by alternating minimization of
//! the quantization error, then Hamming-distance retrieval.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hypersphere::UnitVector;
use crate::search::{RankedItem, RankedList};

const CODE_MAGIC: &[u8; 8] = b"OXDSBITS";
const CODE_VERSION: u32 = 1;

/// Centering, PCA projection and learned rotation that turn embeddings into
/// `bits`-wide binary codes.
#[derive(Debug, Clone)]
pub struct ItqModel {
    mean: DVector<f64>,
    /// `bits x dim`, rows orthonormal (top principal directions).
    projection: DMatrix<f64>,
    /// `bits x bits`, orthogonal.
    rotation: DMatrix<f64>,
    bits: usize,
}

impl ItqModel {
    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rotation(&self) -> &DMatrix<f64> {
        &self.rotation
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }
}

/// A packed binary code for one item. Bit `k` is the sign of the `k`-th
/// rotated coordinate, stored LSB-first within each byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitCode {
    pub item_id: String,
    bytes: Vec<u8>,
    bits: usize,
}

impl BitCode {
    pub fn from_bytes(item_id: impl Into<String>, bytes: Vec<u8>, bits: usize) -> Result<Self> {
        if bytes.len() != bits.div_ceil(8) {
            return Err(Error::WidthMismatch(bytes.len() * 8, bits));
        }
        Ok(BitCode {
            item_id: item_id.into(),
            bytes,
            bits,
        })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit(&self, k: usize) -> bool {
        (self.bytes[k / 8] >> (k % 8)) & 1 == 1
    }
}

/// Number of differing bits between two codes of equal width.
pub fn hamming_distance(a: &BitCode, b: &BitCode) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::WidthMismatch(a.bits, b.bits));
    }
    Ok(a.bytes
        .iter()
        .zip(&b.bytes)
        .map(|(x, y)| (x ^ y).count_ones())
        .sum())
}

/// A fitted model together with the per-iteration traces the fit recorded:
/// the quantization objective and the rotation's orthogonality error.
#[derive(Debug)]
pub struct ItqFit {
    pub model: ItqModel,
    /// `iterations + 1` values of `|sign(VR) - VR|^2_F`; non-increasing.
    pub objective_trace: Vec<f64>,
    /// Frobenius norm of `R^T R - I` after each rotation update.
    pub orthogonality_trace: Vec<f64>,
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let gauss = DMatrix::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    gauss.qr().q()
}

fn orthogonality_error(r: &DMatrix<f64>) -> f64 {
    let n = r.ncols();
    (r.tr_mul(r) - DMatrix::<f64>::identity(n, n)).norm()
}

fn sign_matrix(v: &DMatrix<f64>) -> DMatrix<f64> {
    // sign(0) -> +1 so codes are total functions.
    v.map(|x| if x >= 0.0 { 1.0 } else { -1.0 })
}

/// Fits centering, the top-`bits` PCA directions and the ITQ rotation on the
/// given training embeddings. Deterministic per seed.
pub fn fit_itq(
    embeddings: &[UnitVector],
    bits: usize,
    iterations: usize,
    seed: u64,
) -> Result<ItqFit> {
    if bits == 0 {
        return Err(Error::InvalidParameter("bits must be >= 1".into()));
    }
    let n = embeddings.len();
    let dim = embeddings.first().ok_or(Error::EmptyInput)?.dim();
    if bits > dim {
        return Err(Error::InvalidParameter(format!(
            "{bits} bits exceed the embedding dimension {dim}"
        )));
    }
    if n <= bits {
        return Err(Error::TooFewSamples { samples: n, bits });
    }
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.dim(),
            });
        }
    }

    let mut mean = DVector::zeros(dim);
    for e in embeddings {
        mean += DVector::from_column_slice(e.as_slice());
    }
    mean /= n as f64;

    let mut centered = DMatrix::zeros(n, dim);
    for (i, e) in embeddings.iter().enumerate() {
        for (j, x) in e.as_slice().iter().enumerate() {
            centered[(i, j)] = x - mean[j];
        }
    }

    let covariance = centered.tr_mul(&centered) / n as f64;
    let eigen = covariance.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    // Stable sort keeps the decomposition's order for tied values.
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    // Eigenvalues from centering rounding noise sit near 1e-30; anything a
    // real spread produces is many orders above both floors.
    let max_eigen = eigen.eigenvalues[order[0]].max(0.0);
    if max_eigen <= 1e-20 {
        return Err(Error::RankDeficient {
            needed: bits,
            available: 0,
        });
    }
    let nonzero = order
        .iter()
        .filter(|&&i| eigen.eigenvalues[i] > 1e-12 * max_eigen)
        .count();
    if nonzero < bits {
        return Err(Error::RankDeficient {
            needed: bits,
            available: nonzero,
        });
    }
    let mut projection = DMatrix::zeros(bits, dim);
    for (row, &idx) in order.iter().take(bits).enumerate() {
        projection.set_row(row, &eigen.eigenvectors.column(idx).transpose());
    }

    // N x bits projected data; rows are (P * x_centered)^T.
    let projected = &centered * projection.transpose();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rotation = random_orthogonal(&mut rng, bits);
    let mut objective_trace = Vec::with_capacity(iterations + 1);
    let mut orthogonality_trace = Vec::with_capacity(iterations + 1);
    orthogonality_trace.push(orthogonality_error(&rotation));

    for _ in 0..iterations {
        let rotated = &projected * &rotation;
        let assignments = sign_matrix(&rotated);
        objective_trace.push((&assignments - &rotated).norm_squared());

        // Orthogonal Procrustes: with V^T B = U S W^T, R = U W^T minimizes
        // |B - V R|^2 over orthogonal R.
        let m = projected.tr_mul(&assignments);
        let svd = m.svd(true, true);
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v_t requested");
        rotation = u * v_t;
        orthogonality_trace.push(orthogonality_error(&rotation));
    }
    let rotated = &projected * &rotation;
    objective_trace.push((sign_matrix(&rotated) - &rotated).norm_squared());

    Ok(ItqFit {
        model: ItqModel {
            mean,
            projection,
            rotation,
            bits,
        },
        objective_trace,
        orthogonality_trace,
    })
}

/// Encodes one embedding: bits are the signs of the rotated, PCA-projected,
/// centered coordinates.
pub fn encode(model: &ItqModel, item_id: impl Into<String>, e: &UnitVector) -> Result<BitCode> {
    if e.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: e.dim(),
        });
    }
    let centered = DVector::from_column_slice(e.as_slice()) - &model.mean;
    let projected = &model.projection * centered;
    let rotated = model.rotation.tr_mul(&projected);
    let mut bytes = vec![0u8; model.bits.div_ceil(8)];
    for (k, value) in rotated.iter().enumerate() {
        if *value >= 0.0 {
            bytes[k / 8] |= 1 << (k % 8);
        }
    }
    BitCode::from_bytes(item_id, bytes, model.bits)
}

/// A binary gallery member: the code plus the labels retrieval metrics need.
#[derive(Debug, Clone)]
pub struct BinaryGalleryEntry {
    pub code: BitCode,
    pub domain: String,
    pub category: String,
}

/// Ranks the gallery by ascending Hamming distance to the query, ties broken
/// by ascending item id; scores are `bits - distance` so the ranked list
/// keeps its descending-score contract.
pub fn hamming_search(
    q: &BitCode,
    gallery: &[BinaryGalleryEntry],
    k: Option<usize>,
) -> Result<RankedList> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if let Some(k) = k {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
    }
    let mut scored: Vec<(u32, &BinaryGalleryEntry)> = gallery
        .iter()
        .map(|e| Ok((hamming_distance(q, &e.code)?, e)))
        .collect::<Result<_>>()?;
    scored.sort_unstable_by(|(da, ea), (db, eb)| {
        da.cmp(db)
            .then_with(|| ea.code.item_id.cmp(&eb.code.item_id))
    });
    if let Some(k) = k {
        scored.truncate(k);
    }
    Ok(scored
        .into_iter()
        .map(|(dist, e)| RankedItem {
            item_id: e.code.item_id.clone(),
            score: (q.bits() as f64) - dist as f64,
            domain: e.domain.clone(),
            category: e.category.clone(),
        })
        .collect())
}

/// Writes codes in the binary format: magic `OXDSBITS`, version and bit
/// width as 32-bit little-endian, item count as 64-bit little-endian, then
/// per item a 16-bit id length, the UTF-8 id and the packed code bytes.
pub fn save_codes(codes: &[BitCode], bits: usize, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(CODE_MAGIC)?;
    out.write_all(&CODE_VERSION.to_le_bytes())?;
    out.write_all(&(bits as u32).to_le_bytes())?;
    out.write_all(&(codes.len() as u64).to_le_bytes())?;
    for code in codes {
        if code.bits != bits {
            return Err(Error::WidthMismatch(code.bits, bits));
        }
        let id = code.item_id.as_bytes();
        if id.len() > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "item id `{}...` exceeds 65535 bytes",
                &code.item_id[..32.min(code.item_id.len())]
            )));
        }
        out.write_all(&(id.len() as u16).to_le_bytes())?;
        out.write_all(id)?;
        out.write_all(&code.bytes)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a code file written by [`save_codes`].
pub fn load_codes(path: &Path) -> Result<(usize, Vec<BitCode>)> {
    let mut file = fs::File::open(path)?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    let bad = |msg: &str| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: msg.to_string(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).ok_or_else(|| bad("length overflow"))?;
        if end > data.len() {
            return Err(bad("truncated code file"));
        }
        let slice = &data[pos..end];
        pos = end;
        Ok(slice)
    };
    if take(8)? != CODE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CODE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let bits = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if bits == 0 {
        return Err(bad("zero bit width"));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let code_len = bits.div_ceil(8);
    let mut codes = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(take(id_len)?)
            .map_err(|_| bad("item id is not valid UTF-8"))?
            .to_string();
        let bytes = take(code_len)?.to_vec();
        codes.push(BitCode::from_bytes(id, bytes, bits)?);
    }
    if pos != data.len() {
        return Err(bad("trailing bytes after last code"));
    }
    Ok((bits, codes))
}
