//! On-disk formats: the position-embedding container, checkpoints, and the
//! artifact manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use abswin_core::model::{EmbedMode, HeadKind, HieraLite, ModelSpec};
use abswin_core::posembed::{AbsWinEmbed, NaiveEmbed};
use abswin_core::Grid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const EMBED_MAGIC: &[u8; 4] = b"PEMB";
pub const EMBED_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EmbedFile {
    Naive(NaiveEmbed),
    AbsWin(AbsWinEmbed),
}

impl EmbedFile {
    pub fn channels(&self) -> usize {
        match self {
            EmbedFile::Naive(e) => e.grid.channels(),
            EmbedFile::AbsWin(e) => e.channels(),
        }
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> CliResult<()> {
    let v = u32::try_from(v).map_err(|_| CliError::Format(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// `PEMB` | version | kind (0 naive, 1 abswin) | height | width | channels |
/// window_size | global_size, all u32 LE, then f32 LE values (window part
/// before global part for abswin).
pub fn encode_embed(e: &EmbedFile) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(EMBED_MAGIC);
    push_u32(&mut out, EMBED_VERSION as usize)?;
    let payload: Vec<&[f32]> = match e {
        EmbedFile::Naive(n) => {
            let g = &n.grid;
            for v in [0, g.height(), g.width(), g.channels(), 0, 0] {
                push_u32(&mut out, v)?;
            }
            vec![g.data()]
        }
        EmbedFile::AbsWin(a) => {
            let (w, g) = (a.window_size(), a.global_size());
            for v in [1, w, w, a.channels(), w, g] {
                push_u32(&mut out, v)?;
            }
            vec![a.window().data(), a.global().data()]
        }
    };
    for part in payload {
        for v in part {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embed(bytes: &[u8]) -> CliResult<EmbedFile> {
    let bad = |m: &str| CliError::Format(format!("embedding file: {m}"));
    if bytes.len() < 32 || &bytes[..4] != EMBED_MAGIC {
        return Err(bad("missing PEMB header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != EMBED_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let (kind, h, w, c, ws, gs) = (word(1), word(2), word(3), word(4), word(5), word(6));
    let floats: Vec<f32> = bytes[32..]
        .chunks(4)
        .map(|b| b.try_into().map(f32::from_le_bytes).map_err(|_| bad("truncated payload")))
        .collect::<CliResult<_>>()?;
    match kind {
        0 => {
            if floats.len() != h * w * c {
                return Err(bad("payload length does not match header"));
            }
            Ok(EmbedFile::Naive(NaiveEmbed { grid: Grid::new(h, w, c, floats)? }))
        }
        1 => {
            let (nw, ng) = (ws * ws * c, gs * gs * c);
            if floats.len() != nw + ng || h != ws || w != ws {
                return Err(bad("payload length does not match header"));
            }
            let window = Grid::new(ws, ws, c, floats[..nw].to_vec())?;
            let global = Grid::new(gs, gs, c, floats[nw..].to_vec())?;
            Ok(EmbedFile::AbsWin(AbsWinEmbed::new(window, global)?))
        }
        k => Err(bad(&format!("unknown kind {k}"))),
    }
}

pub fn read_embed(path: &Path) -> CliResult<EmbedFile> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_embed(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn window_list(items: &[Option<usize>]) -> String {
    items.iter().map(|w| w.map_or("global".to_string(), |w| w.to_string())).collect::<Vec<_>>().join(",")
}

pub fn spec_to_pairs(spec: &ModelSpec) -> Vec<(String, String)> {
    let mut v = vec![
        ("input_grid", spec.input_grid.to_string()),
        ("patch_size", spec.patch_size.to_string()),
        ("in_channels", spec.in_channels.to_string()),
        ("stage_depths", join(&spec.stage_depths)),
        ("stage_dims", join(&spec.stage_dims)),
        ("stage_heads", join(&spec.stage_heads)),
        ("stage_windows", window_list(&spec.stage_window_sizes)),
        ("global_layers", join(&spec.global_layer_indices)),
        ("relpos_global", spec.relpos_global.to_string()),
        ("mlp_ratio", spec.mlp_ratio.to_string()),
        ("embed_mode", spec.embed_mode.as_str().to_string()),
        ("window_size", spec.window_size.to_string()),
        ("global_size", spec.global_size.to_string()),
        ("decoder_dim", spec.decoder_dim.to_string()),
        ("decoder_depth", spec.decoder_depth.to_string()),
        ("decoder_heads", spec.decoder_heads.to_string()),
    ];
    match spec.head {
        HeadKind::Classify { classes } => {
            v.push(("head", "classify".into()));
            v.push(("classes", classes.to_string()));
        }
        HeadKind::Mae { mask_ratio } => {
            v.push(("head", "mae".into()));
            v.push(("mask_ratio", format!("{mask_ratio:?}")));
        }
    }
    v.into_iter().map(|(k, s)| (k.to_string(), s)).collect()
}

pub fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad integer {t:?}"))).collect()
}

pub fn parse_windows(s: &str) -> Result<Vec<Option<usize>>, String> {
    s.split(',')
        .map(|t| match t.trim() {
            "global" => Ok(None),
            t => t.parse::<usize>().map(Some).map_err(|_| format!("bad window {t:?}")),
        })
        .collect()
}

pub fn spec_from_pairs(map: &BTreeMap<String, String>) -> Result<ModelSpec, String> {
    let get = |k: &str| map.get(k).map(String::as_str).ok_or_else(|| format!("missing key {k}"));
    let num = |k: &str| -> Result<usize, String> { get(k)?.parse().map_err(|_| format!("{k}: not an integer")) };
    let head = match get("head")? {
        "classify" => HeadKind::Classify { classes: num("classes")? },
        "mae" => HeadKind::Mae { mask_ratio: get("mask_ratio")?.parse().map_err(|_| "mask_ratio: not a number")? },
        h => return Err(format!("unknown head {h}")),
    };
    Ok(ModelSpec {
        input_grid: num("input_grid")?,
        patch_size: num("patch_size")?,
        in_channels: num("in_channels")?,
        stage_depths: parse_list(get("stage_depths")?)?,
        stage_dims: parse_list(get("stage_dims")?)?,
        stage_heads: parse_list(get("stage_heads")?)?,
        stage_window_sizes: parse_windows(get("stage_windows")?)?,
        global_layer_indices: parse_list(get("global_layers")?)?,
        relpos_global: get("relpos_global")?.parse().map_err(|_| "relpos_global: not a bool")?,
        mlp_ratio: num("mlp_ratio")?,
        embed_mode: EmbedMode::parse(get("embed_mode")?).ok_or("embed_mode: expected naive or abswin")?,
        window_size: num("window_size")?,
        global_size: num("global_size")?,
        head,
        decoder_dim: num("decoder_dim")?,
        decoder_depth: num("decoder_depth")?,
        decoder_heads: num("decoder_heads")?,
    })
}

pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// A saved model: spec, metadata, the f32 embedding export, and every
/// parameter in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: HieraLite,
    /// `config_hash`, `seed`, `task`, `pretrain_grid`, ... as written.
    pub metadata: BTreeMap<String, String>,
}

pub const SPEC_FILE: &str = "spec.txt";
pub const EMBED_FILE: &str = "embed.pemb";
pub const TENSOR_FILE: &str = "tensors.bin";
pub const TENSOR_MANIFEST: &str = "manifest.tsv";

pub fn model_embed(model: &HieraLite) -> CliResult<EmbedFile> {
    match model.spec().embed_mode {
        EmbedMode::Naive => model.naive_embed().map(EmbedFile::Naive),
        EmbedMode::AbsWin => model.abswin_embed().map(EmbedFile::AbsWin),
    }
    .ok_or_else(|| CliError::Format("model has no position embedding".into()))
}

impl Checkpoint {
    /// Files of the checkpoint as `(name, bytes)` in write order.
    pub fn encode(&self) -> CliResult<Vec<(&'static str, Vec<u8>)>> {
        let mut spec = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(spec, "# {k}={v}");
        }
        for (k, v) in spec_to_pairs(self.model.spec()) {
            let _ = writeln!(spec, "{k}={v}");
        }
        let mut tensors = Vec::new();
        let mut manifest = String::from("name\trows\tcols\toffset\tlen\n");
        for p in self.model.params().iter() {
            let offset = tensors.len();
            for v in &p.value {
                tensors.extend_from_slice(&v.to_le_bytes());
            }
            let _ = writeln!(manifest, "{}\t{}\t{}\t{}\t{}", p.name, p.rows, p.cols, offset, tensors.len() - offset);
        }
        Ok(vec![
            (SPEC_FILE, spec.into_bytes()),
            (EMBED_FILE, encode_embed(&model_embed(&self.model)?)?),
            (TENSOR_MANIFEST, manifest.into_bytes()),
            (TENSOR_FILE, tensors),
        ])
    }

    pub fn save(&self, dir: &Path) -> CliResult<Vec<(PathBuf, Vec<u8>)>> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut written = Vec::new();
        for (name, bytes) in self.encode()? {
            let path = dir.join(name);
            fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
            written.push((path, bytes));
        }
        Ok(written)
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| CliError::io(&path, e))
        };
        let spec_text = String::from_utf8(read(SPEC_FILE)?).map_err(|_| CliError::Format("spec.txt is not utf-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in spec_text.lines().filter_map(|l| l.strip_prefix("# ")) {
            if let Some((k, v)) = line.split_once('=') {
                metadata.insert(k.to_string(), v.to_string());
            }
        }
        let pairs = parse_pairs(&spec_text).map_err(CliError::Format)?;
        let spec = spec_from_pairs(&pairs).map_err(CliError::Format)?;
        let mut model = HieraLite::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let manifest = String::from_utf8(read(TENSOR_MANIFEST)?).map_err(|_| CliError::Format("manifest is not utf-8".into()))?;
        let tensors = read(TENSOR_FILE)?;
        let mut seen = 0;
        for line in manifest.lines().skip(1).filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || CliError::Format(format!("manifest row {line:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            let n = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let (rows, cols, offset, len) = (n(f[1])?, n(f[2])?, n(f[3])?, n(f[4])?);
            let p = model.params_mut().get_mut(f[0]).ok_or_else(|| CliError::Format(format!("unexpected tensor {}", f[0])))?;
            if (p.rows, p.cols) != (rows, cols) || len != rows * cols * 8 {
                return Err(CliError::Format(format!("tensor {} has the wrong shape", f[0])));
            }
            let bytes = tensors.get(offset..offset + len).ok_or_else(bad)?;
            p.value = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            seen += 1;
        }
        if seen != model.params().len() {
            return Err(CliError::Format(format!("checkpoint has {seen} tensors, model needs {}", model.params().len())));
        }
        let stored = read_embed(&dir.join(EMBED_FILE))?;
        if stored != model_embed(&model)? {
            return Err(CliError::Format("embedding export disagrees with the stored tensors".into()));
        }
        Ok(Checkpoint { model, metadata })
    }
}

/// `output_dir/MANIFEST.tsv`: a `# key=value` metadata row, then artifact
/// path (relative), byte size, sha256.
pub fn write_manifest(dir: &Path, artifacts: &[(PathBuf, Vec<u8>)], metadata: &str) -> CliResult<PathBuf> {
    let mut rows: Vec<(String, usize, String)> = artifacts
        .iter()
        .map(|(p, b)| {
            let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
            (rel, b.len(), sha256_hex(b))
        })
        .collect();
    rows.sort();
    rows.dedup_by(|a, b| a.0 == b.0);
    let mut text = format!("# {metadata}\nartifact\tbytes\tsha256\n");
    for (name, len, hash) in rows {
        let _ = writeln!(text, "{name}\t{len}\t{hash}");
    }
    let path = dir.join("MANIFEST.tsv");
    fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Parses a manifest and checks every listed artifact against its hash.
pub fn verify_manifest(dir: &Path) -> CliResult<usize> {
    let path = dir.join("MANIFEST.tsv");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut count = 0;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some("artifact\tbytes\tsha256") {
        return Err(CliError::Format("manifest: unexpected header".into()));
    }
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(CliError::Format(format!("manifest row {line:?}")));
        }
        let p = dir.join(f[0]);
        let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        if bytes.len().to_string() != f[1] || sha256_hex(&bytes) != f[2] {
            return Err(CliError::Format(format!("artifact {} does not match the manifest", f[0])));
        }
        count += 1;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use abswin_core::posembed::trunc_normal_grid;

    #[test]
    fn embed_round_trip_both_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let naive = EmbedFile::Naive(NaiveEmbed { grid: trunc_normal_grid(5, 7, 3, 0.02, &mut rng) });
        let abswin = EmbedFile::AbsWin(AbsWinEmbed::random(4, 3, 6, &mut rng).unwrap());
        for e in [naive, abswin] {
            let bytes = encode_embed(&e).unwrap();
            assert_eq!(&bytes[..4], b"PEMB");
            assert_eq!(decode_embed(&bytes).unwrap(), e);
            assert!(decode_embed(&bytes[..bytes.len() - 2]).is_err());
        }
        assert!(decode_embed(b"NOPE").is_err());
    }

    #[test]
    fn embed_header_layout() {
        let e = EmbedFile::Naive(NaiveEmbed { grid: Grid::filled(2, 3, 1, 0.5) });
        let b = encode_embed(&e).unwrap();
        assert_eq!(b.len(), 32 + 6 * 4);
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &0u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &3u32.to_le_bytes());
        assert_eq!(&b[32..36], &0.5f32.to_le_bytes());
    }

    #[test]
    fn spec_pairs_round_trip() {
        let mut spec = ModelSpec::toy();
        spec.global_layer_indices = vec![1, 3];
        spec.head = HeadKind::Mae { mask_ratio: 0.6 };
        let text: String = spec_to_pairs(&spec).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        assert_eq!(spec_from_pairs(&parse_pairs(&text).unwrap()).unwrap(), spec);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [EmbedMode::Naive, EmbedMode::AbsWin] {
            let spec = ModelSpec { embed_mode: mode, head: HeadKind::Mae { mask_ratio: 0.6 }, ..ModelSpec::toy() };
            let model = HieraLite::new(spec, &mut rng).unwrap();
            let mut metadata = BTreeMap::new();
            metadata.insert("seed".to_string(), "3".to_string());
            let ck = Checkpoint { model, metadata };
            let sub = dir.path().join(mode.as_str());
            let written = ck.save(&sub).unwrap();
            assert_eq!(Checkpoint::load(&sub).unwrap(), ck);
            write_manifest(dir.path(), &written, "seed=3").unwrap();
            assert_eq!(verify_manifest(dir.path()).unwrap(), 4);
        }
        let junk = dir.path().join("abswin").join(TENSOR_FILE);
        fs::write(&junk, b"short").unwrap();
        assert!(Checkpoint::load(&dir.path().join("abswin")).is_err());
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }
}
