//! Named, hierarchically grouped learnable parameters.
//!
//! Every model component registers its tensors under a dotted path whose
//! first segment is the parameter group (`env`, `self`, `fusion`, `trunk`,
//! `heads`, `aux`). Groups can be frozen per training stage: frozen tensors
//! bind onto the tape without `requires_grad`, so they receive no gradient
//! and the optimizer never touches them.
//!
//! Serialization is a flat binary container of `(name, shape, f64 LE
//! payload)` records plus a human-readable text manifest; round-trips are
//! bit-exact.

use crate::autodiff::{Grads, Tape, Tensor, Var};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"DTPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a parameter container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("duplicate parameter name {0}")]
    Duplicate(String),
}

/// Ordered name → tensor map with per-group freeze flags.
#[derive(Debug, Clone, Default)]
pub struct ParamTree {
    entries: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.entries.insert(name.to_string(), t).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Names in deterministic (lexicographic) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn scalar_count(&self, group: Option<&str>) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| group.map_or(true, |g| in_group(k, g)))
            .map(|(_, t)| t.len())
            .sum()
    }

    // ── freezing ────────────────────────────────────────────────────────

    pub fn freeze_group(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn frozen_groups(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(|s| s.as_str())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|g| in_group(name, g))
    }

    // ── tape binding ────────────────────────────────────────────────────

    /// Place every parameter on the tape. Unfrozen tensors request
    /// gradients; frozen ones enter as constants.
    pub fn bind(&self, tape: &mut Tape) -> VarMap {
        self.bind_override(tape, "", None)
    }

    /// Like [`bind`](Self::bind), but `override_name` (if any) maps to the
    /// supplied var instead of a fresh leaf — the hook `grad_check` uses to
    /// probe one tensor of a larger module.
    pub fn bind_override(&self, tape: &mut Tape, override_name: &str, var: Option<Var>) -> VarMap {
        let mut map = BTreeMap::new();
        for (name, tensor) in &self.entries {
            if name == override_name {
                map.insert(name.clone(), var.expect("override var"));
                continue;
            }
            let mut t = tensor.clone();
            t.requires_grad = !self.is_frozen(name);
            map.insert(name.clone(), tape.leaf(t));
        }
        VarMap { map }
    }

    /// Collect gradients for every unfrozen parameter after a backward pass.
    /// Parameters a loss never touched contribute zero gradients.
    pub fn grads_by_name(&self, vars: &VarMap, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, tensor) in &self.entries {
            if self.is_frozen(name) {
                continue;
            }
            let g = grads
                .get(vars.v(name))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
            out.insert(name.clone(), g);
        }
        out
    }

    // ── integrity ───────────────────────────────────────────────────────

    /// FNV-1a over names, shapes, and raw little-endian payloads; equal
    /// hashes on equal trees make bitwise freeze checks cheap.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in &self.entries {
            eat(name.as_bytes());
            eat(&[0xff]);
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    /// Raw payload of one group, for exact bitwise comparisons.
    pub fn group_bytes(&self, group: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.entries {
            if in_group(name, group) {
                out.extend_from_slice(name.as_bytes());
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    // ── serialization ───────────────────────────────────────────────────

    /// Write the binary container to `path` and a text manifest to
    /// `<path>.manifest`.
    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.frozen.len() as u32).to_le_bytes());
        for g in &self.frozen {
            buf.extend_from_slice(&(g.len() as u32).to_le_bytes());
            buf.extend_from_slice(g.as_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;

        let mut manifest = String::new();
        manifest.push_str(&format!(
            "params {} tensors {} scalars hash {:016x}\n",
            self.entries.len(),
            self.scalar_count(None),
            self.content_hash()
        ));
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name} [{}] {}\n", dims.join("x"), t.len()));
        }
        for g in &self.frozen {
            manifest.push_str(&format!("frozen {g}\n"));
        }
        std::fs::write(path.with_extension(ext_plus(path, "manifest")), manifest)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ParamError> {
            if *pos + n > bytes.len() {
                return Err(ParamError::Corrupt(format!("truncated at byte {pos}", pos = *pos)));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(ParamError::BadMagic);
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(ParamError::BadVersion(version));
        }
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let mut tree = ParamTree::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| ParamError::Corrupt(e.to_string()))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let elems: usize = shape.iter().product();
            let raw = take(&mut pos, elems * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tree.entries.insert(name.clone(), Tensor::new(&shape, data)).is_some() {
                return Err(ParamError::Duplicate(name));
            }
        }
        let nfrozen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        for _ in 0..nfrozen {
            let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let g = String::from_utf8(take(&mut pos, len)?.to_vec())
                .map_err(|e| ParamError::Corrupt(e.to_string()))?;
            tree.frozen.insert(g);
        }
        Ok(tree)
    }
}

fn in_group(name: &str, group: &str) -> bool {
    name == group || name.starts_with(group) && name[group.len()..].starts_with('.')
}

fn ext_plus(path: &Path, ext: &str) -> String {
    match path.extension() {
        Some(e) => format!("{}.{ext}", e.to_string_lossy()),
        None => ext.to_string(),
    }
}

/// Parameter names resolved to tape vars for one forward pass.
pub struct VarMap {
    map: BTreeMap<String, Var>,
}

impl VarMap {
    pub fn v(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound on tape"))
    }
}

/// Accumulate `src` gradients into `dst` (missing keys are inserted).
pub fn accumulate_grads(dst: &mut BTreeMap<String, Tensor>, src: &BTreeMap<String, Tensor>) {
    for (k, g) in src {
        match dst.get_mut(k) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            None => {
                dst.insert(k.clone(), g.clone());
            }
        }
    }
}

/// Scale every gradient in place (e.g. to average per-sample sums).
pub fn scale_grads(grads: &mut BTreeMap<String, Tensor>, c: f64) {
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v *= c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_tree() -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("env.conv3.w", Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 0.1, -0.2, f64::MIN_POSITIVE]));
        t.insert("self.fwd.w_x", Tensor::row(&[1.0 / 3.0, 2.0f64.sqrt()]));
        t.insert("trunk.block0.ff.w1", Tensor::scalar(-0.0));
        t
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut tree = sample_tree();
        tree.freeze_group("env");
        tree.save(&path).unwrap();
        let loaded = ParamTree::load(&path).unwrap();
        assert_eq!(loaded.content_hash(), tree.content_hash());
        for (name, t) in tree.iter() {
            let l = loaded.get(name);
            assert_eq!(l.shape(), t.shape());
            for (a, b) in l.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        assert!(loaded.is_frozen("env.conv3.w"));
        assert!(!loaded.is_frozen("self.fwd.w_x"));
        assert!(path.with_extension("bin.manifest").exists());
    }

    #[test]
    fn manifest_lists_every_tensor() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.bin");
        sample_tree().save(&path).unwrap();
        let manifest = std::fs::read_to_string(path.with_extension("bin.manifest")).unwrap();
        assert!(manifest.contains("env.conv3.w [2x3] 6"));
        assert!(manifest.contains("self.fwd.w_x [1x2] 2"));
    }

    #[test]
    fn freeze_is_prefix_scoped_not_substring_scoped() {
        let mut t = ParamTree::new();
        t.insert("self.w", Tensor::scalar(1.0));
        t.insert("selfish.w", Tensor::scalar(1.0));
        t.freeze_group("self");
        assert!(t.is_frozen("self.w"));
        assert!(!t.is_frozen("selfish.w"));
    }

    #[test]
    fn frozen_params_bind_without_grad() {
        let mut tree = sample_tree();
        tree.freeze_group("env");
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let y = tape.sum(vars.v("env.conv3.w"));
        let z = tape.sum(vars.v("self.fwd.w_x"));
        let total = tape.add(y, z).unwrap();
        let grads = tape.backward(total).unwrap();
        let by_name = tree.grads_by_name(&vars, &grads);
        assert!(!by_name.contains_key("env.conv3.w"));
        assert!(by_name.contains_key("self.fwd.w_x"));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(ParamTree::load(&path), Err(ParamError::BadMagic)));
    }
}
