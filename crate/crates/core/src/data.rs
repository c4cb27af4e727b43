//! Criteo-style TSV ingestion, vocabularies, 8:1:1 splits, the synthetic
//! long-tail generator and the encoded on-disk dataset format.
//!
//! Raw TSV layout: label, then every numerical field, then every
//! categorical field, each group in schema-file order. Gzip input is
//! detected from its magic bytes.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{Batch, FeatureValue, FieldKind, FieldSchema, Schema};
use crate::numerics::{sigmoid, RngStream};

pub const DEFAULT_MIN_COUNT: usize = 10;
pub const OOV_INDEX: usize = 0;

/// One line of a schema file: `name kind [vocab_hint]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDecl {
    pub name: String,
    pub kind: FieldKind,
    pub vocab_hint: Option<usize>,
}

pub fn parse_schema_file(path: &Path) -> Result<Vec<FieldDecl>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading schema {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(err(format!("expected `name kind [vocab_hint]`, found {} tokens", parts.len())));
        }
        let kind: FieldKind = parts[1].parse().map_err(|e: Error| err(e.to_string()))?;
        let vocab_hint = match parts.get(2) {
            Some(h) => Some(h.parse().map_err(|e| err(format!("vocab hint `{h}`: {e}")))?),
            None => None,
        };
        out.push(FieldDecl { name: parts[0].to_string(), kind, vocab_hint });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("schema file {} declares no fields", path.display())));
    }
    Ok(out)
}

/// A parsed but not yet encoded record. Values are stored in declaration
/// order of their kind.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub label: f64,
    pub numerical: Vec<Option<f64>>,
    pub categorical: Vec<Option<String>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawData {
    pub records: Vec<RawRecord>,
    /// Numerical cells that were empty and will be read as 0.
    pub missing_numerical: usize,
    pub missing_categorical: usize,
}

fn open_maybe_gzip(path: &Path) -> Result<Box<dyn Read>> {
    let mut file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(MultiGzDecoder::new(BufReader::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn tsv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().delimiter(b'\t').has_headers(false).flexible(true).quoting(false).from_reader(r)
}

fn parse_label(s: &str) -> std::result::Result<f64, String> {
    match s.trim() {
        "0" | "0.0" => Ok(0.0),
        "1" | "1.0" => Ok(1.0),
        other => Err(format!("label `{other}` is not 0 or 1")),
    }
}

pub fn read_raw_tsv(path: &Path, fields: &[FieldDecl]) -> Result<RawData> {
    let num = fields.iter().filter(|f| f.kind == FieldKind::Numerical).count();
    let cat = fields.len() - num;
    let mut out = RawData::default();
    let mut rdr = tsv_reader(open_maybe_gzip(path)?);
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 1 + num + cat {
            return Err(err(format!("{} columns, expected {} (label + {num} numerical + {cat} categorical)", rec.len(), 1 + num + cat)));
        }
        let label = parse_label(&rec[0]).map_err(err)?;
        let mut numerical = Vec::with_capacity(num);
        for j in 0..num {
            let cell = rec[1 + j].trim();
            if cell.is_empty() {
                out.missing_numerical += 1;
                numerical.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|e| err(format!("column {}: `{cell}`: {e}", 2 + j)))?;
                if !v.is_finite() {
                    return Err(err(format!("column {}: non-finite value", 2 + j)));
                }
                numerical.push(Some(v));
            }
        }
        let categorical = (0..cat)
            .map(|j| {
                let cell = rec[1 + num + j].trim();
                if cell.is_empty() {
                    out.missing_categorical += 1;
                    None
                } else {
                    Some(cell.to_string())
                }
            })
            .collect();
        out.records.push(RawRecord { label, numerical, categorical });
    }
    Ok(out)
}

/// `sign(x) · ln(1 + |x|)`, a common squashing for heavy-tailed counts.
pub fn log_transform(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldVocab {
    pub name: String,
    /// Index `i + 1` holds `values[i]`; index 0 is the OOV bucket.
    pub values: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl FieldVocab {
    fn from_values(name: String, values: Vec<String>) -> Self {
        let index = values.iter().enumerate().map(|(i, v)| (v.clone(), i + 1)).collect();
        FieldVocab { name, values, index }
    }

    /// Rows of the embedding table, OOV included.
    pub fn size(&self) -> usize {
        self.values.len() + 1
    }

    pub fn lookup(&self, value: Option<&str>) -> usize {
        value.and_then(|v| self.index.get(v).copied()).unwrap_or(OOV_INDEX)
    }
}

/// Per-categorical-field vocabularies. Values seen fewer than `min_count`
/// times collapse to OOV; the rest get dense ids in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub fields: Vec<FieldVocab>,
}

impl Vocabulary {
    pub fn build(fields: &[FieldDecl], records: &[RawRecord], min_count: usize) -> Vocabulary {
        let cat: Vec<&FieldDecl> = fields.iter().filter(|f| f.kind == FieldKind::Categorical).collect();
        let vocabs = cat
            .iter()
            .enumerate()
            .map(|(j, decl)| {
                let mut counts: HashMap<&str, (usize, usize)> = HashMap::with_capacity(decl.vocab_hint.unwrap_or(0));
                for (row, r) in records.iter().enumerate() {
                    if let Some(v) = r.categorical[j].as_deref() {
                        counts.entry(v).or_insert((0, row)).0 += 1;
                    }
                }
                let mut kept: Vec<(&str, usize)> =
                    counts.into_iter().filter(|(_, (c, _))| *c >= min_count.max(1)).map(|(v, (_, first))| (v, first)).collect();
                kept.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
                FieldVocab::from_values(decl.name.clone(), kept.into_iter().map(|(v, _)| v.to_string()).collect())
            })
            .collect();
        Vocabulary { fields: vocabs }
    }

    /// Schema in declaration order with vocabulary sizes filled in.
    pub fn schema(&self, fields: &[FieldDecl]) -> Result<Schema> {
        let mut cat = self.fields.iter();
        let mut out = Vec::with_capacity(fields.len());
        for (i, f) in fields.iter().enumerate() {
            let vocab_size = match f.kind {
                FieldKind::Categorical => cat.next().ok_or_else(|| Error::Data("vocabulary is missing a field".into()))?.size(),
                FieldKind::Numerical => 0,
            };
            out.push(FieldSchema { name: f.name.clone(), kind: f.kind, vocab_size, field_index: i });
        }
        Schema::new(out)
    }

    pub fn encode(&self, fields: &[FieldDecl], r: &RawRecord, log: bool) -> Vec<FeatureValue> {
        let (mut n, mut c) = (0, 0);
        fields
            .iter()
            .map(|f| match f.kind {
                FieldKind::Numerical => {
                    let x = r.numerical[n].unwrap_or(0.0);
                    n += 1;
                    FeatureValue::Value(if log { log_transform(x) } else { x })
                }
                FieldKind::Categorical => {
                    let id = self.fields[c].lookup(r.categorical[c].as_deref());
                    c += 1;
                    FeatureValue::Id(id)
                }
            })
            .collect()
    }

    /// Lines of `field\tvalue\tindex`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .quote_style(csv::QuoteStyle::Never)
            .from_path(path)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
        for f in &self.fields {
            for (i, v) in f.values.iter().enumerate() {
                w.write_record([f.name.as_str(), v.as_str(), &(i + 1).to_string()])
                    .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
            }
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path, fields: &[FieldDecl]) -> Result<Vocabulary> {
        let mut values: Vec<Vec<(usize, String)>> =
            vec![Vec::new(); fields.iter().filter(|f| f.kind == FieldKind::Categorical).count()];
        let names: Vec<&str> = fields.iter().filter(|f| f.kind == FieldKind::Categorical).map(|f| f.name.as_str()).collect();
        let mut rdr = tsv_reader(File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?);
        for (i, rec) in rdr.records().enumerate() {
            let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let rec = rec.map_err(|e| err(e.to_string()))?;
            if rec.len() != 3 {
                return Err(err("expected field, value, index".into()));
            }
            let j = names.iter().position(|n| *n == &rec[0]).ok_or_else(|| err(format!("unknown field `{}`", &rec[0])))?;
            let idx: usize = rec[2].parse().map_err(|e| err(format!("index: {e}")))?;
            values[j].push((idx, rec[1].to_string()));
        }
        let fields = names
            .iter()
            .zip(values)
            .map(|(name, mut v)| {
                v.sort();
                if v.iter().enumerate().any(|(i, (idx, _))| *idx != i + 1) {
                    return Err(Error::Data(format!("{}: indices of `{name}` are not dense from 1", path.display())));
                }
                Ok(FieldVocab::from_values(name.to_string(), v.into_iter().map(|(_, s)| s).collect()))
            })
            .collect::<Result<_>>()?;
        Ok(Vocabulary { fields })
    }
}

/// Index sets of an 8:1:1 split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it into `0.8n` and `0.1n` (rounded)
/// and the rest.
pub fn split_811(n: usize, seed: u64) -> Result<Split> {
    if n < 10 {
        return Err(Error::Data(format!("an 8:1:1 split needs at least 10 records, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::new(seed).fork(811).shuffle(&mut idx);
    let n_train = (8 * n + 5) / 10;
    let n_valid = (n + 5) / 10;
    let test = idx.split_off(n_train + n_valid);
    let valid = idx.split_off(n_train);
    Ok(Split { train: idx, valid, test })
}

/// An encoded dataset with its three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub train: Batch,
    pub valid: Batch,
    pub test: Batch,
}

impl Dataset {
    pub fn from_split(schema: Schema, all: &Batch, split: &Split) -> Dataset {
        Dataset { schema, train: all.select(&split.train), valid: all.select(&split.valid), test: all.select(&split.test) }
    }

    pub fn len(&self) -> usize {
        self.train.rows() + self.valid.rows() + self.test.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hex SHA-256 over the schema and every encoded value of every split.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.schema).expect("schema serializes"));
        for (name, b) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            h.update(name.as_bytes());
            h.update((b.rows() as u64).to_le_bytes());
            for l in b.labels() {
                h.update(l.to_le_bytes());
            }
            for v in b.values() {
                match *v {
                    FeatureValue::Id(id) => {
                        h.update([0u8]);
                        h.update((id as u64).to_le_bytes());
                    }
                    FeatureValue::Value(x) => {
                        h.update([1u8]);
                        h.update(x.to_le_bytes());
                    }
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `schema.tsv`, `train.tsv`, `valid.tsv`, `test.tsv` and
    /// `dataset.hash` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut schema = String::new();
        for f in self.schema.fields() {
            schema.push_str(&format!("{}\t{}\t{}\n", f.name, f.kind.name(), f.vocab_size));
        }
        write_file(&dir.join("schema.tsv"), schema.as_bytes())?;
        for (name, b) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            write_encoded(&dir.join(format!("{name}.tsv")), b)?;
        }
        write_file(&dir.join("dataset.hash"), format!("{}\n", self.hash()).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let schema = read_encoded_schema(&dir.join("schema.tsv"))?;
        let read = |name: &str| read_encoded(&dir.join(format!("{name}.tsv")), &schema);
        let ds = Dataset { train: read("train")?, valid: read("valid")?, test: read("test")?, schema };
        if let Ok(stored) = fs::read_to_string(dir.join("dataset.hash")) {
            if stored.trim() != ds.hash() {
                return Err(Error::Data(format!("{}: contents do not match dataset.hash", dir.display())));
            }
        }
        Ok(ds)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_encoded(path: &Path, b: &Batch) -> Result<()> {
    let mut out = String::with_capacity(b.rows() * (2 + 8 * b.num_fields()));
    for r in 0..b.rows() {
        out.push_str(if b.labels()[r] == 1.0 { "1" } else { "0" });
        for v in b.row(r) {
            out.push('\t');
            match v {
                FeatureValue::Id(id) => out.push_str(&id.to_string()),
                FeatureValue::Value(x) => out.push_str(&x.to_string()),
            }
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

fn read_encoded_schema(path: &Path) -> Result<Schema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut fields = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(err("expected name, kind, vocabulary size".into()));
        }
        let kind = parts[1].parse().map_err(|e: Error| err(e.to_string()))?;
        let vocab_size = parts[2].parse().map_err(|e| err(format!("vocabulary size: {e}")))?;
        fields.push(FieldSchema { name: parts[0].to_string(), kind, vocab_size, field_index: fields.len() });
    }
    Schema::new(fields)
}

fn read_encoded(path: &Path, schema: &Schema) -> Result<Batch> {
    let mut rdr = tsv_reader(open_maybe_gzip(path)?);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 1 + schema.len() {
            return Err(err(format!("{} columns, expected {}", rec.len(), 1 + schema.len())));
        }
        labels.push(parse_label(&rec[0]).map_err(err)?);
        for (j, f) in schema.fields().iter().enumerate() {
            let cell = &rec[1 + j];
            values.push(match f.kind {
                FieldKind::Categorical => FeatureValue::Id(cell.parse().map_err(|e| err(format!("column {}: {e}", j + 2)))?),
                FieldKind::Numerical => FeatureValue::Value(cell.parse().map_err(|e| err(format!("column {}: {e}", j + 2)))?),
            });
        }
    }
    let batch = Batch::new(schema.len(), values, labels)?;
    batch.conforms_to(schema)?;
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    pub min_count: usize,
    pub log_transform: bool,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { min_count: DEFAULT_MIN_COUNT, log_transform: false, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub vocabulary: Vocabulary,
    pub missing_numerical: usize,
    pub missing_categorical: usize,
}

/// Reads a raw TSV, splits it 8:1:1, builds vocabularies from the training
/// split only and encodes all three splits.
pub fn ingest_tsv(path: &Path, fields: &[FieldDecl], opts: &IngestOptions) -> Result<Ingested> {
    let raw = read_raw_tsv(path, fields)?;
    let split = split_811(raw.records.len(), opts.seed)?;
    let train_raw: Vec<RawRecord> = split.train.iter().map(|&i| raw.records[i].clone()).collect();
    let vocabulary = Vocabulary::build(fields, &train_raw, opts.min_count);
    let schema = vocabulary.schema(fields)?;
    let mut values = Vec::with_capacity(raw.records.len() * fields.len());
    for r in &raw.records {
        values.extend(vocabulary.encode(fields, r, opts.log_transform));
    }
    let all = Batch::new(fields.len(), values, raw.records.iter().map(|r| r.label).collect())?;
    Ok(Ingested {
        dataset: Dataset::from_split(schema, &all, &split),
        vocabulary,
        missing_numerical: raw.missing_numerical,
        missing_categorical: raw.missing_categorical,
    })
}

/// Parameters of the synthetic CTR generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub categorical_fields: usize,
    pub numerical_fields: usize,
    /// Distinct values per categorical field (the OOV row comes on top).
    pub vocab_size: usize,
    /// Power-law exponent of value frequencies; 0 gives uniform ids.
    pub zipf_exponent: f64,
    /// Dimension of the latent vectors behind pairwise interactions.
    pub latent_dim: usize,
    /// Standard deviation of per-value first-order weights.
    pub linear_scale: f64,
    /// Standard deviation of latent vector entries; 0 disables interactions.
    pub interaction_scale: f64,
    pub bias: f64,
    /// Standard deviation of Gaussian noise added to the score before the
    /// sigmoid; infinite noise makes labels fair coin flips.
    pub noise: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            categorical_fields: 10,
            numerical_fields: 5,
            vocab_size: 1000,
            zipf_exponent: 1.2,
            latent_dim: 4,
            linear_scale: 0.5,
            interaction_scale: 0.5,
            bias: -1.0,
            noise: 0.0,
            samples: 10_000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categorical_fields + self.numerical_fields == 0 {
            return Err(Error::config("data.synthetic", "needs at least one field"));
        }
        if self.samples == 0 {
            return Err(Error::config("data.synthetic.samples", "must be at least 1"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("data.synthetic.vocab_size", "must be at least 1"));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::config("data.synthetic.zipf_exponent", "must be finite and non-negative"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("data.synthetic.noise", "must be non-negative"));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        let fields = (0..self.numerical_fields)
            .map(|i| (format!("I{}", i + 1), FieldKind::Numerical, 0))
            .chain((0..self.categorical_fields).map(|i| (format!("C{}", i + 1), FieldKind::Categorical, self.vocab_size + 1)));
        Schema::from_fields(fields).expect("generated schema is valid")
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub schema: Schema,
    pub data: Batch,
    /// Noise-free ground-truth score of every row.
    pub oracle_scores: Vec<f64>,
}

impl SyntheticData {
    pub fn split(&self, seed: u64) -> Result<(Dataset, Split)> {
        let split = split_811(self.data.rows(), seed)?;
        Ok((Dataset::from_split(self.schema.clone(), &self.data, &split), split))
    }
}

/// Draws records whose labels follow `Bernoulli(sigmoid(s + noise))`, where
/// `s` is a bias plus per-value weights plus all pairwise inner products of
/// per-value latent vectors (numerical fields scale theirs by the value).
/// Categorical ids `1..=vocab_size` follow a Zipf law, id 1 most frequent.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let schema = spec.schema();
    let root = RngStream::new(spec.seed);
    let mut truth = root.fork(1);
    let d = spec.latent_dim;
    let latent_std = spec.interaction_scale / (d.max(1) as f64).sqrt();
    let mut weights = Vec::with_capacity(schema.len());
    let mut latents = Vec::with_capacity(schema.len());
    for f in schema.fields() {
        let rows = if f.kind == FieldKind::Categorical { f.vocab_size } else { 1 };
        weights.push((0..rows).map(|_| truth.gaussian(0.0, spec.linear_scale)).collect::<Vec<f64>>());
        latents.push((0..rows * d).map(|_| truth.gaussian(0.0, latent_std)).collect::<Vec<f64>>());
    }
    let zipf = Zipf::new(spec.vocab_size as u64, spec.zipf_exponent)
        .map_err(|e| Error::config("data.synthetic.zipf_exponent", e.to_string()))?;
    let mut draws = root.fork(2);
    let mut noise = root.fork(3);
    let f = schema.len();
    let mut values = Vec::with_capacity(spec.samples * f);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut oracle_scores = Vec::with_capacity(spec.samples);
    let mut sum = vec![0.0; d];
    for _ in 0..spec.samples {
        let mut score = spec.bias;
        let mut sq = 0.0;
        sum.iter_mut().for_each(|s| *s = 0.0);
        for (i, field) in schema.fields().iter().enumerate() {
            let (row, scale, value) = match field.kind {
                FieldKind::Categorical => {
                    let id = (draws.sample(&zipf) as usize).clamp(1, spec.vocab_size);
                    (id, 1.0, FeatureValue::Id(id))
                }
                FieldKind::Numerical => {
                    let x = draws.gaussian(0.0, 1.0);
                    (0, x, FeatureValue::Value(x))
                }
            };
            values.push(value);
            score += weights[i][row] * scale;
            for (t, s) in sum.iter_mut().enumerate() {
                let u = latents[i][row * d + t] * scale;
                *s += u;
                sq += u * u;
            }
        }
        score += 0.5 * (sum.iter().map(|s| s * s).sum::<f64>() - sq);
        let p = if spec.noise.is_finite() { sigmoid(score + noise.gaussian(0.0, spec.noise)) } else { 0.5 };
        labels.push(if noise.bernoulli(p) { 1.0 } else { 0.0 });
        oracle_scores.push(score);
    }
    Ok(SyntheticData { schema, data: Batch::new(f, values, labels)?, oracle_scores })
}

/// Writes synthetic data as a raw Criteo-layout TSV plus schema file, with
/// categorical ids rendered as `v<id>`.
pub fn write_raw_synthetic(data: &SyntheticData, tsv: &Path, schema_file: &Path) -> Result<()> {
    let mut decl = String::new();
    for f in data.schema.fields() {
        match f.kind {
            FieldKind::Numerical => decl.push_str(&format!("{} numerical\n", f.name)),
            FieldKind::Categorical => decl.push_str(&format!("{} categorical {}\n", f.name, f.vocab_size - 1)),
        }
    }
    let fields = data.schema.fields();
    let mut out = String::new();
    let b = &data.data;
    for r in 0..b.rows() {
        out.push_str(if b.labels()[r] == 1.0 { "1" } else { "0" });
        let row = b.row(r);
        for kind in [FieldKind::Numerical, FieldKind::Categorical] {
            for (v, f) in row.iter().zip(fields) {
                if f.kind != kind {
                    continue;
                }
                out.push('\t');
                match v {
                    FeatureValue::Value(x) => out.push_str(&x.to_string()),
                    FeatureValue::Id(id) => out.push_str(&format!("v{id}")),
                }
            }
        }
        out.push('\n');
    }
    write_file(schema_file, decl.as_bytes())?;
    write_file(tsv, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::auc;
    use std::io::Write;

    fn decls() -> Vec<FieldDecl> {
        vec![
            FieldDecl { name: "I1".into(), kind: FieldKind::Numerical, vocab_hint: None },
            FieldDecl { name: "C1".into(), kind: FieldKind::Categorical, vocab_hint: Some(10) },
            FieldDecl { name: "I2".into(), kind: FieldKind::Numerical, vocab_hint: None },
        ]
    }

    #[test]
    fn schema_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.txt");
        fs::write(&path, "# criteo-like\nI1 numerical\nC1 categorical 10\n\nI2 num\n").unwrap();
        assert_eq!(parse_schema_file(&path).unwrap(), decls());
        fs::write(&path, "I1 numerical\nC1 banana\n").unwrap();
        assert!(matches!(parse_schema_file(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn three_line_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        fs::write(&path, "1\t0.5\t3\tab\n0\t\t-1\tcd\n1\t2\t4\t\n").unwrap();
        let raw = read_raw_tsv(&path, &decls()).unwrap();
        assert_eq!(raw.records.len(), 3);
        assert_eq!(raw.records[0], RawRecord { label: 1.0, numerical: vec![Some(0.5), Some(3.0)], categorical: vec![Some("ab".into())] });
        assert_eq!(raw.records[1].numerical, vec![None, Some(-1.0)]);
        assert_eq!(raw.records[2].categorical, vec![None]);
        assert_eq!((raw.missing_numerical, raw.missing_categorical), (1, 1));

        let vocab = Vocabulary::build(&decls(), &raw.records, 1);
        let enc = vocab.encode(&decls(), &raw.records[1], false);
        assert_eq!(enc, vec![FeatureValue::Value(0.0), FeatureValue::Id(2), FeatureValue::Value(-1.0)]);
        let unseen = RawRecord { label: 0.0, numerical: vec![Some(1.0), Some(1.0)], categorical: vec![Some("zz".into())] };
        assert_eq!(vocab.encode(&decls(), &unseen, false)[1], FeatureValue::Id(OOV_INDEX));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        fs::write(&path, "1\t0.5\t3\tab\n0\tx\t1\tcd\n").unwrap();
        assert!(matches!(read_raw_tsv(&path, &decls()), Err(Error::Parse { line: 2, .. })));
        fs::write(&path, "1\t0.5\t3\tab\n0\t1\t1\tcd\n2\t1\t1\tcd\n").unwrap();
        assert!(matches!(read_raw_tsv(&path, &decls()), Err(Error::Parse { line: 3, .. })));
        fs::write(&path, "1\t0.5\t3\n").unwrap();
        assert!(matches!(read_raw_tsv(&path, &decls()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("d.tsv");
        let gz = dir.path().join("d.tsv.gz");
        let text = "1\t0.5\t3\tab\n0\t\t-1\tcd\n";
        fs::write(&plain, text).unwrap();
        let mut enc = flate2::write::GzEncoder::new(File::create(&gz).unwrap(), flate2::Compression::default());
        enc.write_all(text.as_bytes()).unwrap();
        enc.finish().unwrap();
        assert_eq!(read_raw_tsv(&plain, &decls()).unwrap(), read_raw_tsv(&gz, &decls()).unwrap());
    }

    #[test]
    fn vocabulary_threshold_and_order() {
        let rec = |c: &str| RawRecord { label: 0.0, numerical: vec![None, None], categorical: vec![Some(c.into())] };
        let records: Vec<RawRecord> = ["b", "a", "b", "rare", "a", "c", "c"].iter().map(|c| rec(c)).collect();
        let v = Vocabulary::build(&decls(), &records, 2);
        assert_eq!(v.fields[0].values, vec!["b", "a", "c"]);
        assert_eq!(v.fields[0].lookup(Some("rare")), 0);
        assert_eq!(v.fields[0].lookup(Some("c")), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.write(&path).unwrap();
        assert_eq!(Vocabulary::read(&path, &decls()).unwrap(), v);
        assert_eq!(v.schema(&decls()).unwrap().field(1).vocab_size, 4);
    }

    #[test]
    fn split_sizes_and_partition() {
        let s = split_811(10, 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        assert!(split_811(9, 1).is_err());
        for n in [10, 37, 1001] {
            let s = split_811(n, 3).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
            all.sort();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!((s.train.len() as f64 - 0.8 * n as f64).abs() <= 1.0);
            assert!((s.valid.len() as f64 - 0.1 * n as f64).abs() <= 1.0);
            assert!((s.test.len() as f64 - 0.1 * n as f64).abs() <= 1.0);
        }
        assert_eq!(split_811(100, 5).unwrap(), split_811(100, 5).unwrap());
        assert_ne!(split_811(100, 5).unwrap(), split_811(100, 6).unwrap());
    }

    #[test]
    fn zipf_top_mass_matches_normalization() {
        let spec = SyntheticSpec {
            categorical_fields: 1,
            numerical_fields: 0,
            vocab_size: 1000,
            zipf_exponent: 1.5,
            samples: 1_000_000,
            ..Default::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let top = data.data.values().iter().filter(|v| **v == FeatureValue::Id(1)).count() as f64 / 1e6;
        let norm: f64 = (1..=1000).map(|k| (k as f64).powf(-1.5)).sum();
        let expected = 1.0 / norm;
        assert!((top - expected).abs() / expected <= 0.05, "{top} vs {expected}");
    }

    #[test]
    fn synthetic_is_reproducible_and_pure_noise_is_uninformative() {
        let spec = SyntheticSpec { samples: 2000, seed: 4, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.oracle_scores, b.oracle_scores);
        assert!(auc(&a.oracle_scores, a.data.labels()).unwrap() > 0.7);

        let noisy = generate_synthetic(&SyntheticSpec { noise: f64::INFINITY, samples: 20_000, ..spec }).unwrap();
        let ceiling = auc(&noisy.oracle_scores, noisy.data.labels()).unwrap();
        assert!((ceiling - 0.5).abs() < 0.02, "{ceiling}");
    }

    #[test]
    fn encoded_dataset_round_trip() {
        let data = generate_synthetic(&SyntheticSpec { samples: 200, seed: 2, ..Default::default() }).unwrap();
        let (ds, _) = data.split(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.hash(), ds.hash());
        fs::write(dir.path().join("dataset.hash"), "00\n").unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }

    #[test]
    fn ingest_is_deterministic_and_uses_train_vocabulary() {
        let data = generate_synthetic(&SyntheticSpec { samples: 500, seed: 8, vocab_size: 50, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (tsv, schema) = (dir.path().join("raw.tsv"), dir.path().join("schema.txt"));
        write_raw_synthetic(&data, &tsv, &schema).unwrap();
        let fields = parse_schema_file(&schema).unwrap();
        let opts = IngestOptions { min_count: 3, ..Default::default() };
        let a = ingest_tsv(&tsv, &fields, &opts).unwrap();
        let b = ingest_tsv(&tsv, &fields, &opts).unwrap();
        assert_eq!(a.dataset.hash(), b.dataset.hash());
        assert_eq!(a.dataset.len(), 500);
        // Every kept value occurs at least min_count times in the training split.
        let split = split_811(500, 0).unwrap();
        let train: Vec<RawRecord> = {
            let raw = read_raw_tsv(&tsv, &fields).unwrap();
            split.train.iter().map(|&i| raw.records[i].clone()).collect()
        };
        for (j, fv) in a.vocabulary.fields.iter().enumerate() {
            for v in &fv.values {
                let count = train.iter().filter(|r| r.categorical[j].as_deref() == Some(v.as_str())).count();
                assert!(count >= 3);
            }
        }
        assert_eq!(log_transform(-(std::f64::consts::E - 1.0)), -1.0);
    }
}
