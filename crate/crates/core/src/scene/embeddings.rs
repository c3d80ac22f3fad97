//! Token-embedding store.
//!
//! Each table is a `.vemb` file: `"VEMB"`, `u16` version, `u8` endianness
//! flag (1 = little-endian), `u32 d_in`, `u32 tokens_per_entry`,
//! `u32 count`, then per entry a `u32`-length-prefixed UTF-8 id followed by
//! a row-major `f32` matrix, and a CRC32C trailer. A JSON index ties the
//! view table and the question table together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::synth::{SyntheticScene, OBJECT_LABELS};
use super::{QAInstance, SceneError, SceneManifest};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::selector::EmbeddingSeq;

pub const VEMB_MAGIC: &[u8; 4] = b"VEMB";
pub const VEMB_VERSION: u16 = 1;
const LITTLE_ENDIAN: u8 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 3 * 4;

/// Fixed-shape token matrices keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub d_in: usize,
    pub tokens: usize,
    pub entries: BTreeMap<String, Array2<f32>>,
}

impl EmbeddingTable {
    pub fn new(d_in: usize, tokens: usize) -> Self {
        EmbeddingTable {
            d_in,
            tokens,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: String, m: Array2<f32>) -> Result<(), SceneError> {
        if m.dim() != (self.tokens, self.d_in) {
            return Err(SceneError::DimensionMismatch {
                id,
                expected: (self.tokens, self.d_in),
                found: m.dim(),
            });
        }
        self.entries.insert(id, m);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Array2<f32>, SceneError> {
        self.entries
            .get(id)
            .ok_or_else(|| SceneError::MissingEmbedding(id.to_string()))
    }

    pub fn seq(&self, id: &str) -> Result<EmbeddingSeq, SceneError> {
        Ok(EmbeddingSeq::new(id, self.get(id)?.mapv(f64::from)))
    }
}

pub fn write_vemb(table: &EmbeddingTable) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VEMB_MAGIC);
    out.extend_from_slice(&VEMB_VERSION.to_le_bytes());
    out.push(LITTLE_ENDIAN);
    for v in [table.d_in as u32, table.tokens as u32, table.entries.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (id, m) in &table.entries {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for row in m.rows() {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32c::crc32c(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], SceneError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SceneError::FormatVersionMismatch("entry overruns file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_vemb(bytes: &[u8]) -> Result<EmbeddingTable, SceneError> {
    if bytes.len() < 7 {
        return Err(SceneError::CorruptChecksum);
    }
    if &bytes[..4] != VEMB_MAGIC {
        return Err(SceneError::FormatVersionMismatch("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VEMB_VERSION || bytes[6] != LITTLE_ENDIAN {
        return Err(SceneError::FormatVersionMismatch(format!(
            "version {version}, endianness flag {}",
            bytes[6]
        )));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(SceneError::CorruptChecksum);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32c::crc32c(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(SceneError::CorruptChecksum);
    }
    let mut cur = Cursor { bytes: body, at: 7 };
    let d_in = cur.u32()? as usize;
    let tokens = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let mut table = EmbeddingTable::new(d_in, tokens);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| SceneError::FormatVersionMismatch("id is not UTF-8".into()))?
            .to_string();
        let raw = cur.take(tokens * d_in * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let m = Array2::from_shape_vec((tokens, d_in), values).expect("shape matches length");
        table.entries.insert(id, m);
    }
    if cur.at != body.len() {
        return Err(SceneError::FormatVersionMismatch("trailing bytes after entries".into()));
    }
    Ok(table)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreIndex {
    format: String,
    version: u16,
    d_in: usize,
    view_tokens: usize,
    question_tokens: usize,
    views_file: String,
    questions_file: String,
    view_count: usize,
    question_count: usize,
    views_sha256: String,
    questions_sha256: String,
}

/// View token matrices keyed `"{scene_id}/{view_id}"` and question token
/// matrices keyed by question id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub views: EmbeddingTable,
    pub questions: EmbeddingTable,
}

impl EmbeddingStore {
    pub fn new(d_in: usize, view_tokens: usize, question_tokens: usize) -> Self {
        EmbeddingStore {
            views: EmbeddingTable::new(d_in, view_tokens),
            questions: EmbeddingTable::new(d_in, question_tokens),
        }
    }

    pub fn view_key(scene_id: &str, view_id: &str) -> String {
        format!("{scene_id}/{view_id}")
    }

    pub fn d_in(&self) -> usize {
        self.views.d_in
    }

    pub fn view_seq(&self, scene_id: &str, view_id: &str) -> Result<EmbeddingSeq, SceneError> {
        self.views.seq(&Self::view_key(scene_id, view_id))
    }

    pub fn question_seq(&self, question_id: &str) -> Result<EmbeddingSeq, SceneError> {
        self.questions.seq(question_id)
    }

    /// All views of a scene in manifest order.
    pub fn scene_views(&self, scene: &SceneManifest) -> Result<Vec<EmbeddingSeq>, SceneError> {
        scene
            .views
            .iter()
            .map(|v| self.view_seq(&scene.scene_id, &v.view_id))
            .collect()
    }

    /// Absorbs every entry of `other`; shapes must agree.
    pub fn merge(&mut self, other: EmbeddingStore) -> Result<(), SceneError> {
        for (id, m) in other.views.entries {
            self.views.insert(id, m)?;
        }
        for (id, m) in other.questions.entries {
            self.questions.insert(id, m)?;
        }
        Ok(())
    }

    /// Fails on the first manifest view or question lacking an embedding.
    pub fn check_covers<'a>(
        &self,
        scenes: impl IntoIterator<Item = &'a SceneManifest>,
        questions: impl IntoIterator<Item = &'a QAInstance>,
    ) -> Result<(), SceneError> {
        for s in scenes {
            for v in &s.views {
                self.views.get(&Self::view_key(&s.scene_id, &v.view_id))?;
            }
        }
        for q in questions {
            self.questions.get(&q.question_id)?;
        }
        Ok(())
    }

    fn table_paths(index: &Path) -> (PathBuf, PathBuf) {
        let stem = index
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "embeddings".into());
        (
            index.with_file_name(format!("{stem}.views.vemb")),
            index.with_file_name(format!("{stem}.questions.vemb")),
        )
    }

    /// Writes the two tables next to `index` and the JSON index itself.
    pub fn save(&self, index: &Path) -> Result<(), SceneError> {
        let (views_path, questions_path) = Self::table_paths(index);
        let views = write_vemb(&self.views);
        let questions = write_vemb(&self.questions);
        write_atomic(&views_path, &views).map_err(|e| SceneError::io(&views_path, e))?;
        write_atomic(&questions_path, &questions).map_err(|e| SceneError::io(&questions_path, e))?;
        let name = |p: &Path| p.file_name().expect("file name").to_string_lossy().into_owned();
        let meta = StoreIndex {
            format: "vemb-index".into(),
            version: VEMB_VERSION,
            d_in: self.views.d_in,
            view_tokens: self.views.tokens,
            question_tokens: self.questions.tokens,
            views_file: name(&views_path),
            questions_file: name(&questions_path),
            view_count: self.views.entries.len(),
            question_count: self.questions.entries.len(),
            views_sha256: sha256_hex(&views),
            questions_sha256: sha256_hex(&questions),
        };
        let text = serde_json::to_string_pretty(&meta).expect("index serializes");
        write_atomic(index, text.as_bytes()).map_err(|e| SceneError::io(index, e))
    }

    pub fn load(index: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(index).map_err(|e| SceneError::io(index, e))?;
        let meta: StoreIndex =
            serde_json::from_str(&text).map_err(|e| SceneError::schema("embedding index", e.to_string()))?;
        if meta.version != VEMB_VERSION {
            return Err(SceneError::FormatVersionMismatch(format!("index version {}", meta.version)));
        }
        let base = index.parent().unwrap_or(Path::new("."));
        let read = |name: &str, sha: &str| -> Result<EmbeddingTable, SceneError> {
            let p = base.join(name);
            let bytes = std::fs::read(&p).map_err(|e| SceneError::io(&p, e))?;
            if sha256_hex(&bytes) != sha {
                return Err(SceneError::CorruptChecksum);
            }
            read_vemb(&bytes)
        };
        let views = read(&meta.views_file, &meta.views_sha256)?;
        let questions = read(&meta.questions_file, &meta.questions_sha256)?;
        if views.d_in != meta.d_in || questions.d_in != meta.d_in {
            return Err(SceneError::schema("d_in", "tables disagree with the index"));
        }
        if views.entries.len() != meta.view_count || questions.entries.len() != meta.question_count {
            return Err(SceneError::schema("count", "tables disagree with the index"));
        }
        Ok(EmbeddingStore { views, questions })
    }
}

fn label_seed(label: &str, d_in: usize) -> u64 {
    let digest = sha256_hex(format!("concept:{label}:{d_in}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex")
}

fn raw_concept(label: &str, d_in: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(label_seed(label, d_in));
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let v: Array1<f64> = Array1::from_shape_simple_fn(d_in, || normal.sample(&mut rng));
    let n = v.dot(&v).sqrt();
    v / n
}

/// Fixed random unit vector for an object label; identical in every scene.
/// When `d_in` can hold the whole synthetic vocabulary, the vocabulary's
/// vectors are Gram-Schmidt orthonormalized in vocabulary order, so a view
/// seeing many objects does not blur their concepts together.
pub fn concept_vector(label: &str, d_in: usize) -> Array1<f64> {
    let Some(pos) = OBJECT_LABELS.iter().position(|&l| l == label) else {
        return raw_concept(label, d_in);
    };
    if d_in < OBJECT_LABELS.len() {
        return raw_concept(label, d_in);
    }
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(pos + 1);
    for l in &OBJECT_LABELS[..=pos] {
        let mut v = raw_concept(l, d_in);
        for b in &basis {
            let p = v.dot(b);
            v.scaled_add(-p, b);
        }
        let n = v.dot(&v).sqrt();
        basis.push(v / n);
    }
    basis.pop().expect("non-empty")
}

/// Stand-in features for one synthetic scene: every token is isotropic
/// noise (expected norm 1) plus `signal_strength` times the sum of the
/// concept vectors of the objects the view sees. Question tokens carry the
/// concept of the object the question mentions.
pub fn embed_synthetic(
    scene: &SyntheticScene,
    d_in: usize,
    tokens_per_view: usize,
    seed: u64,
    signal_strength: f64,
) -> EmbeddingStore {
    assert!(signal_strength >= 0.0, "signal_strength must be >= 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid");
    let concepts: Vec<Array1<f64>> = scene.objects.iter().map(|o| concept_vector(&o.label, d_in)).collect();

    let mut make = |signal: &Array1<f64>, scale: f64| -> Array2<f32> {
        Array2::from_shape_fn((tokens_per_view, d_in), |(_, j)| {
            (noise.sample(&mut rng) + scale * signal[j]) as f32
        })
    };

    let mut store = EmbeddingStore::new(d_in, tokens_per_view, tokens_per_view);
    for (view, visible) in scene.manifest.views.iter().zip(&scene.visibility) {
        let mut signal = Array1::zeros(d_in);
        for &o in visible {
            signal += &concepts[o];
        }
        let key = EmbeddingStore::view_key(&scene.manifest.scene_id, &view.view_id);
        store.views.insert(key, make(&signal, signal_strength)).expect("shape");
    }
    // questions carry the mentioned concept at unit strength; only views
    // are scaled by signal_strength
    for q in &scene.qa {
        let signal = concepts[q.anchor].clone();
        store
            .questions
            .insert(q.qa.question_id.clone(), make(&signal, 1.0))
            .expect("shape");
    }
    store
}

/// Fraction of views (among those seeing at least one object) whose
/// visible set is recovered exactly by taking the `|visible|` scene concepts
/// closest, by cosine, to the view's mean token.
pub fn nearest_concept_accuracy(scene: &SyntheticScene, store: &EmbeddingStore) -> f64 {
    let d_in = store.d_in();
    let concepts: Vec<Array1<f64>> = scene.objects.iter().map(|o| concept_vector(&o.label, d_in)).collect();
    let mut hits = 0usize;
    let mut total = 0usize;
    for (view, visible) in scene.manifest.views.iter().zip(&scene.visibility) {
        if visible.is_empty() {
            continue;
        }
        let m = store
            .views
            .get(&EmbeddingStore::view_key(&scene.manifest.scene_id, &view.view_id))
            .expect("embedded view")
            .mapv(f64::from)
            .mean_axis(Axis(0))
            .expect("tokens");
        let mut ranked: Vec<(usize, f64)> = concepts.iter().map(|c| c.dot(&m)).enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut top: Vec<usize> = ranked[..visible.len()].iter().map(|r| r.0).collect();
        top.sort_unstable();
        let mut want = visible.clone();
        want.sort_unstable();
        total += 1;
        hits += usize::from(top == want);
    }
    if total == 0 {
        return 1.0;
    }
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(3, 2);
        t.insert("a".into(), Array2::from_shape_vec((2, 3), vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        t.insert("sc/ü".into(), Array2::from_elem((2, 3), -0.5)).unwrap();
        t
    }

    #[test]
    fn vemb_round_trip() {
        let t = table();
        assert_eq!(read_vemb(&write_vemb(&t)).unwrap(), t);
    }

    #[test]
    fn vemb_corruption() {
        let bytes = write_vemb(&table());
        assert!(matches!(read_vemb(&bytes[..bytes.len() - 2]), Err(SceneError::CorruptChecksum)));
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 6] ^= 1;
        assert!(matches!(read_vemb(&flipped), Err(SceneError::CorruptChecksum)));
        let mut be = bytes;
        be[6] = 0;
        assert!(matches!(read_vemb(&be), Err(SceneError::FormatVersionMismatch(_))));
    }

    #[test]
    fn insert_checks_shape() {
        let mut t = EmbeddingTable::new(3, 2);
        assert!(t.insert("x".into(), Array2::zeros((2, 4))).is_err());
    }

    #[test]
    fn concept_vectors_are_unit_and_stable() {
        let a = concept_vector("chair", 32);
        assert!((a.dot(&a) - 1.0).abs() < 1e-12);
        assert_eq!(a, concept_vector("chair", 32));
        assert_ne!(a, concept_vector("table", 32));
    }
}
