//! Binary model and reference files: a four-byte magic, a kind byte, a
//! format version, then length-prefixed little-endian fields.

use std::io::{Read, Write};
use std::path::Path;

use crate::decomposition::TuckerFactors;
use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, Features, OneHot};
use crate::tensor::{Matrix, Tensor3};

pub const MAGIC: &[u8; 4] = b"TMDP";
pub const VERSION: u32 = 1;
const KIND_MODEL: u8 = 1;
const KIND_REFERENCE: u8 = 2;

/// Frozen ground truth: feature maps, the transition tensor expressed in
/// them, and free-form provenance entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub phi: Features,
    pub psi: Features,
    pub p: Tensor3,
    pub metadata: Vec<(String, String)>,
}

impl ReferenceModel {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

struct Encoder(Vec<u8>);

impl Encoder {
    fn new(kind: u8) -> Self {
        let mut e = Self(MAGIC.to_vec());
        e.0.push(kind);
        e.u32(VERSION);
        e
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn matrix(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        self.f64s(m.data());
    }

    fn tensor(&mut self, t: &Tensor3) {
        t.dims().iter().for_each(|&d| self.usize(d));
        self.f64s(t.data());
    }

    fn features(&mut self, f: &Features) {
        match f {
            Features::Fourier(fm) => {
                self.0.push(0);
                self.matrix(fm.frequencies());
                self.f64s(fm.offsets());
                self.f64(fm.scale());
                self.f64(fm.bandwidth());
                match fm.whitener() {
                    Some(w) => {
                        self.0.push(1);
                        self.matrix(w);
                    }
                    None => self.0.push(0),
                }
            }
            Features::OneHot(h) => {
                self.0.push(1);
                self.f64s(h.weights());
            }
        }
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(buf: &'a [u8], kind: u8) -> Result<Self> {
        if buf.len() < 9 || &buf[..4] != MAGIC {
            return Err(Error::Format("not a tensor-mdp file (bad magic)".into()));
        }
        if buf[4] != kind {
            return Err(Error::Format(format!("file holds kind {}, expected {kind}", buf[4])));
        }
        let mut d = Self { buf, pos: 5 };
        let version = d.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(d)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in memory")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Format(format!("array of {n} values overruns the file")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let (r, c) = (self.usize()?, self.usize()?);
        Matrix::new(r, c, self.f64s()?).map_err(|e| Error::Format(e.to_string()))
    }

    fn tensor(&mut self) -> Result<Tensor3> {
        let dims = [self.usize()?, self.usize()?, self.usize()?];
        Tensor3::new(dims, self.f64s()?).map_err(|e| Error::Format(e.to_string()))
    }

    fn features(&mut self) -> Result<Features> {
        match self.byte()? {
            0 => {
                let freq = self.matrix()?;
                let offsets = self.f64s()?;
                let scale = self.f64()?;
                let bandwidth = self.f64()?;
                let whitener = match self.byte()? {
                    0 => None,
                    1 => Some(self.matrix()?),
                    t => return Err(Error::Format(format!("bad whitener tag {t}"))),
                };
                Ok(Features::Fourier(FeatureMap::from_parts(freq, offsets, scale, bandwidth)?.with_whitener(whitener)?))
            }
            1 => Ok(Features::OneHot(OneHot::with_weights(self.f64s()?))),
            t => Err(Error::Format(format!("bad feature tag {t}"))),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_model(m: &EmbeddingModel) -> Vec<u8> {
    let mut e = Encoder::new(KIND_MODEL);
    m.ranks.iter().for_each(|&r| e.usize(r));
    e.usize(m.hooi_rounds);
    e.f64(m.sigma_ridge);
    e.f64(m.condition);
    e.features(&m.phi);
    e.features(&m.psi);
    e.matrix(&m.sigma_hat);
    e.tensor(&m.p_hat);
    e.tensor(&m.factors.core);
    e.matrix(&m.factors.u1);
    e.matrix(&m.factors.u2);
    e.matrix(&m.factors.u3);
    e.0
}

pub fn decode_model(buf: &[u8]) -> Result<EmbeddingModel> {
    let mut d = Decoder::new(buf, KIND_MODEL)?;
    let ranks = [d.usize()?, d.usize()?, d.usize()?];
    let hooi_rounds = d.usize()?;
    let sigma_ridge = d.f64()?;
    let condition = d.f64()?;
    let phi = d.features()?;
    let psi = d.features()?;
    let sigma_hat = d.matrix()?;
    let p_hat = d.tensor()?;
    let factors = TuckerFactors { core: d.tensor()?, u1: d.matrix()?, u2: d.matrix()?, u3: d.matrix()? };
    d.finish()?;
    if factors.ranks() != ranks || factors.u1.rows() != phi.dim() || factors.u2.rows() != psi.dim() {
        return Err(Error::Format("model factors disagree with ranks or feature dimensions".into()));
    }
    Ok(EmbeddingModel { factors, p_hat, sigma_hat, sigma_ridge, condition, phi, psi, ranks, hooi_rounds })
}

pub fn encode_reference(r: &ReferenceModel) -> Vec<u8> {
    let mut e = Encoder::new(KIND_REFERENCE);
    e.usize(r.metadata.len());
    for (k, v) in &r.metadata {
        e.str(k);
        e.str(v);
    }
    e.features(&r.phi);
    e.features(&r.psi);
    e.tensor(&r.p);
    e.0
}

pub fn decode_reference(buf: &[u8]) -> Result<ReferenceModel> {
    let mut d = Decoder::new(buf, KIND_REFERENCE)?;
    let n = d.usize()?;
    let metadata = (0..n).map(|_| Ok((d.str()?, d.str()?))).collect::<Result<Vec<_>>>()?;
    let phi = d.features()?;
    let psi = d.features()?;
    let p = d.tensor()?;
    d.finish()?;
    if p.dims() != [phi.dim(), psi.dim(), phi.dim()] {
        return Err(Error::Format("reference tensor disagrees with feature dimensions".into()));
    }
    Ok(ReferenceModel { phi, psi, p, metadata })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)?.write_all(bytes)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn save_model(m: &EmbeddingModel, path: &Path) -> Result<()> {
    write_file(path, &encode_model(m))
}

pub fn load_model(path: &Path) -> Result<EmbeddingModel> {
    decode_model(&read_file(path)?)
}

pub fn save_reference(r: &ReferenceModel, path: &Path) -> Result<()> {
    write_file(path, &encode_reference(r))
}

pub fn load_reference(path: &Path) -> Result<ReferenceModel> {
    decode_reference(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{estimate_transition, EstimateOptions};
    use crate::features::make_rff;

    fn model() -> EmbeddingModel {
        let phi = Features::Fourier(make_rff(2, 6, 0.5, 1).unwrap().with_whitener(Some(Matrix::identity(6))).unwrap());
        let psi = Features::OneHot(OneHot::with_weights(vec![1.5, 0.5, 2.0]));
        let f = Tensor3::from_fn([6, 3, 6], |i, j, k| ((i * 7 + j * 3 + k) as f64).sin());
        let sigma = Matrix::from_fn(6, 6, |i, j| if i == j { 2.0 } else { 0.1 });
        estimate_transition(&f, &sigma, &phi, &psi, [2, 2, 3], EstimateOptions::default()).unwrap()
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = model();
        let bytes = encode_model(&m);
        assert_eq!(decode_model(&bytes).unwrap(), m);
        assert_eq!(encode_model(&decode_model(&bytes).unwrap()), bytes);
    }

    #[test]
    fn reference_round_trip_through_a_file() {
        let m = model();
        let r = ReferenceModel {
            phi: m.phi.clone(),
            psi: m.psi.clone(),
            p: m.p_hat.clone(),
            metadata: vec![("n".into(), "1000".into()), ("env".into(), "sde".into())],
        };
        let dir = std::env::temp_dir().join(format!("tensor-mdp-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ref.bin");
        save_reference(&r, &path).unwrap();
        let back = load_reference(&path).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.meta("env"), Some("sde"));
    }

    #[test]
    fn rejects_corrupt_files() {
        let bytes = encode_model(&model());
        assert!(matches!(decode_model(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(decode_reference(&bytes), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_model(&long), Err(Error::Format(_))));
    }
}
