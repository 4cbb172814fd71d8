//! Language packs, checkpoints and inference-time composition.
//!
//! A checkpoint is a directory holding `manifest.json` and `payload.bin`.
//! The payload is the little-endian f32 data of every non-alias tensor in
//! manifest order; aliases name the tensor whose array they share.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{DecodeConfig, TranslationModel};
use crate::model::{
    adapter_count, adapter_prefix, parse_adapter_name, AdapterSpec, LayerSel, ModelConfig, ParameterStore, Role,
    Side, OUT_PROJ, SRC_EMBED, TGT_EMBED,
};
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "payload.bin";

/// Name under which a target pack keeps its learned language-code row.
pub const CODE_ROW: &str = "lang_code_row";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackSide {
    Source,
    Target,
}

/// How a target pack signals its language on the source side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetCode {
    /// A learned row, stored in the pack under [`CODE_ROW`].
    Row,
    /// The existing code of an initial language.
    Base(String),
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackHeader {
    pub lang: String,
    pub side: PackSide,
    /// Present for target packs.
    pub code: Option<TargetCode>,
    pub adapter_specs: Vec<AdapterSpec>,
    pub base_fingerprint: String,
}

/// Language-specific parameters trained on top of one base model.
#[derive(Clone, Debug)]
pub struct LanguagePack {
    pub header: PackHeader,
    pub vocab: Vocabulary,
    pub params: ParameterStore,
}

impl PartialEq for LanguagePack {
    fn eq(&self, other: &Self) -> bool {
        self.header == other.header && self.vocab == other.vocab && self.params.bitwise_eq(&other.params)
    }
}

impl LanguagePack {
    pub fn lang(&self) -> &str {
        &self.header.lang
    }

    pub fn side(&self) -> PackSide {
        self.header.side
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alias_of: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    src_vocab: String,
    tgt_vocab: String,
    codes: BTreeMap<String, Option<u32>>,
    decode: DecodeConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    element_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pack: Option<PackHeader>,
    tensors: Vec<TensorEntry>,
}

fn tensor_table(store: &ParameterStore) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut first_of_slot: BTreeMap<usize, String> = BTreeMap::new();
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, e) in store.entries() {
        let t = store.get(name).expect("listed name");
        let alias_of = first_of_slot.get(&e.slot).cloned();
        if alias_of.is_none() {
            first_of_slot.insert(e.slot, name.to_string());
            payload.reserve(t.len() * 4);
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        entries.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), role: e.role, alias_of });
    }
    (entries, payload)
}

fn store_from_table(entries: &[TensorEntry], payload: &[u8]) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    let mut at = 0usize;
    for e in entries {
        if let Some(target) = &e.alias_of {
            if !store.contains(target) {
                return Err(Error::Checkpoint(format!("{} aliases {target}, which is not listed before it", e.name)));
            }
            if store.get(target)?.shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!("{} has a different shape from its alias {target}", e.name)));
            }
            store.alias(&e.name, target, e.role)?;
            continue;
        }
        let n: usize = e.shape.iter().product();
        let bytes = payload.get(at..at + n * 4).ok_or_else(|| Error::TruncatedPayload { tensor: e.name.clone() })?;
        at += n * 4;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(&e.name, Tensor::from_vec(&e.shape, data)?, e.role)?;
    }
    if at != payload.len() {
        return Err(Error::Checkpoint(format!("{} trailing payload bytes", payload.len() - at)));
    }
    Ok(store)
}

/// Content hash of a store: names, shapes, roles, aliasing and values.
pub fn fingerprint(store: &ParameterStore) -> String {
    let (entries, payload) = tensor_table(store);
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&entries).expect("plain data serializes"));
    h.update(&payload);
    hex::encode(h.finalize())
}

fn write(dir: &Path, manifest: &Manifest, payload: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io_at(dir))?;
    let m = dir.join(MANIFEST);
    fs::write(&m, serde_json::to_string_pretty(manifest)?).map_err(Error::io_at(&m))?;
    let p = dir.join(PAYLOAD);
    fs::write(&p, payload).map_err(Error::io_at(&p))
}

fn read(dir: &Path) -> Result<(Manifest, ParameterStore)> {
    let m = dir.join(MANIFEST);
    let text = fs::read_to_string(&m).map_err(Error::io_at(&m))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(manifest.version));
    }
    if manifest.element_type != "f32" {
        return Err(Error::Checkpoint(format!("unsupported element type {}", manifest.element_type)));
    }
    let p = dir.join(PAYLOAD);
    let payload = fs::read(&p).map_err(Error::io_at(&p))?;
    let store = store_from_table(&manifest.tensors, &payload)?;
    Ok((manifest, store))
}

fn manifest(tensors: Vec<TensorEntry>) -> Manifest {
    Manifest { version: FORMAT_VERSION, element_type: "f32".into(), model: None, pack: None, tensors }
}

pub fn save_store(dir: &Path, store: &ParameterStore) -> Result<()> {
    let (tensors, payload) = tensor_table(store);
    write(dir, &manifest(tensors), &payload)
}

pub fn load_store(dir: &Path) -> Result<ParameterStore> {
    Ok(read(dir)?.1)
}

/// Saves parameters, config, vocabularies, codes and decode settings.
pub fn save_model(dir: &Path, model: &TranslationModel) -> Result<()> {
    let (tensors, payload) = tensor_table(&model.store);
    let shared = model.src_vocab == model.tgt_vocab;
    let tgt_stem = if shared { "vocab" } else { "tgt_vocab" };
    let src_stem = if shared { "vocab" } else { "src_vocab" };
    let mut m = manifest(tensors);
    m.model = Some(ModelHeader {
        config: model.config.clone(),
        src_vocab: src_stem.into(),
        tgt_vocab: tgt_stem.into(),
        codes: model.codes.clone(),
        decode: model.decode.clone(),
    });
    write(dir, &m, &payload)?;
    model.src_vocab.save(dir, src_stem)?;
    if !shared {
        model.tgt_vocab.save(dir, tgt_stem)?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<TranslationModel> {
    let (m, store) = read(dir)?;
    let h = m.model.ok_or_else(|| Error::Checkpoint(format!("{} is not a model checkpoint", dir.display())))?;
    h.config.validate()?;
    let src = Arc::new(Vocabulary::load(dir, &h.src_vocab)?);
    let tgt = if h.tgt_vocab == h.src_vocab { src.clone() } else { Arc::new(Vocabulary::load(dir, &h.tgt_vocab)?) };
    Ok(TranslationModel { config: h.config, store: Arc::new(store), src_vocab: src, tgt_vocab: tgt, codes: h.codes, decode: h.decode })
}

pub fn save_pack(dir: &Path, pack: &LanguagePack) -> Result<()> {
    let (tensors, payload) = tensor_table(&pack.params);
    let mut m = manifest(tensors);
    m.pack = Some(pack.header.clone());
    write(dir, &m, &payload)?;
    pack.vocab.save(dir, "vocab")
}

pub fn load_pack(dir: &Path) -> Result<LanguagePack> {
    let (m, params) = read(dir)?;
    let header = m.pack.ok_or_else(|| Error::Checkpoint(format!("{} is not a language pack", dir.display())))?;
    Ok(LanguagePack { header, vocab: Vocabulary::load(dir, "vocab")?, params })
}

fn changed(base: &ParameterStore, trained: &ParameterStore, name: &str) -> bool {
    match base.get(name) {
        Ok(b) => !b.bitwise_eq(trained.get(name).expect("listed name")),
        Err(_) => true,
    }
}

/// Collects what a recipe created or modified relative to `base`.
///
/// Target packs take their source-side code from `trained.codes[lang]`:
/// a row past the end of the base source embedding is stored in the pack,
/// an existing code is recorded by language, and no code is kept as such.
pub fn extract_pack(trained: &TranslationModel, base: &TranslationModel, side: PackSide, lang: &str) -> Result<LanguagePack> {
    let (ts, bs) = (&*trained.store, &*base.store);
    for name in bs.names() {
        if !ts.contains(name) {
            return Err(Error::Validation(format!("trained store lacks base parameter {name}")));
        }
    }
    let mut include: BTreeSet<String> = ts.names().filter(|n| changed(bs, ts, n)).map(str::to_string).collect();
    let mut code = None;
    let vocab = match side {
        PackSide::Source => {
            if let Some(bad) = include.iter().find(|n| *n == TGT_EMBED || *n == OUT_PROJ || n.starts_with("decoder.")) {
                return Err(Error::Validation(format!("source pack would carry decoder-side parameter {bad}")));
            }
            (*trained.src_vocab).clone()
        }
        PackSide::Target => {
            let base_rows = bs.get(SRC_EMBED)?.rows();
            let grown = ts.get(SRC_EMBED)?;
            let old = bs.get(SRC_EMBED)?;
            if grown.cols() != old.cols() || grown.rows() < base_rows || grown.data()[..old.len()] != old.data()[..] {
                return Err(Error::Validation("target recipe modified the base source embedding".into()));
            }
            include.remove(SRC_EMBED);
            code = Some(match trained.code_for(lang)? {
                Some(id) if id as usize >= base_rows => TargetCode::Row,
                Some(id) => TargetCode::Base(
                    base.src_vocab
                        .lang_codes()
                        .iter()
                        .find(|(_, &v)| v == id)
                        .map(|(l, _)| l.clone())
                        .ok_or_else(|| Error::MissingLangCode(lang.to_string()))?,
                ),
                None => TargetCode::None,
            });
            (*trained.tgt_vocab).clone()
        }
    };
    let mut params = ParameterStore::new();
    let mut slot_name: BTreeMap<usize, String> = BTreeMap::new();
    for name in &include {
        let e = ts.entry(name)?;
        match slot_name.get(&e.slot) {
            Some(first) => params.alias(name, first, e.role)?,
            None => {
                params.insert_shared(name, ts.shared(name)?, e.role)?;
                slot_name.insert(e.slot, name.clone());
            }
        }
    }
    if code == Some(TargetCode::Row) {
        let id = trained.code_for(lang)?.expect("row code") as usize;
        let row = ts.get(SRC_EMBED)?.row(id).to_vec();
        params.insert(CODE_ROW, Tensor::from_vec(&[1, row.len()], row)?, Role::LangCodeRow)?;
    }
    if params.is_empty() && code != Some(TargetCode::Row) {
        return Err(Error::EmptyPack);
    }
    let mut adapter_specs = Vec::new();
    for name in params.names() {
        if let Some((s, layer, _, rest)) = parse_adapter_name(name) {
            if rest == "down.weight" {
                let bottleneck = params.get(name)?.cols();
                adapter_specs.push(AdapterSpec::new(s, LayerSel::Set(BTreeSet::from([layer])), bottleneck));
            }
        }
    }
    Ok(LanguagePack {
        header: PackHeader { lang: lang.to_string(), side, code, adapter_specs, base_fingerprint: fingerprint(bs) },
        vocab,
        params,
    })
}

/// Copies a pack's parameters into `store`. Adapters are renumbered to run
/// after any already present at their layer; other names replace the
/// store's, keeping the pack's aliasing.
fn apply_pack(store: &mut ParameterStore, pack: &LanguagePack, taken: &mut BTreeMap<String, String>) -> Result<()> {
    let mut groups: BTreeMap<usize, Vec<(String, Role)>> = BTreeMap::new();
    let mut adapters: BTreeMap<(Side, usize), BTreeMap<usize, Vec<(String, String, Role)>>> = BTreeMap::new();
    for (name, e) in pack.params.entries() {
        if name == CODE_ROW {
            continue;
        }
        if let Some((side, layer, k, rest)) = parse_adapter_name(name) {
            adapters.entry((side, layer)).or_default().entry(k).or_default().push((name.to_string(), rest.to_string(), e.role));
            continue;
        }
        if let Some(other) = taken.insert(name.to_string(), pack.lang().to_string()) {
            return Err(Error::PackConflict(format!("{name} is replaced by both the {other} and the {} pack", pack.lang())));
        }
        groups.entry(e.slot).or_default().push((name.to_string(), e.role));
    }
    for names in groups.values() {
        let value = pack.params.shared(&names[0].0)?;
        let refs: Vec<(&str, Role)> = names.iter().map(|(n, r)| (n.as_str(), *r)).collect();
        store.rebind_shared(&refs, value);
    }
    for ((side, layer), by_k) in adapters {
        let start = adapter_count(store, side, layer);
        for (i, parts) in by_k.into_values().enumerate() {
            let prefix = adapter_prefix(side, layer, start + i + 1);
            for (name, rest, role) in parts {
                store.insert_shared(&format!("{prefix}.{rest}"), pack.params.shared(&name)?, role)?;
            }
        }
    }
    Ok(())
}

/// Builds an inference model from `base` plus at most one pack per side.
/// The base is not modified; unchanged arrays are shared with it.
pub fn compose(base: &TranslationModel, src: Option<&LanguagePack>, tgt: Option<&LanguagePack>) -> Result<TranslationModel> {
    let fp = fingerprint(&base.store);
    for (pack, want) in [(src, PackSide::Source), (tgt, PackSide::Target)] {
        let Some(p) = pack else { continue };
        if p.side() != want {
            return Err(Error::Validation(format!("the {} pack is a {:?} pack", p.lang(), p.side())));
        }
        if p.header.base_fingerprint != fp {
            return Err(Error::FingerprintMismatch { expected: fp.clone(), found: p.header.base_fingerprint.clone() });
        }
    }
    let mut store = (*base.store).clone();
    let mut taken = BTreeMap::new();
    let mut src_vocab = base.src_vocab.clone();
    let mut tgt_vocab = base.tgt_vocab.clone();
    if let Some(p) = src {
        apply_pack(&mut store, p, &mut taken)?;
        src_vocab = Arc::new(p.vocab.clone());
    }
    let mut codes: BTreeMap<String, Option<u32>> =
        src_vocab.lang_codes().iter().map(|(l, &id)| (l.clone(), Some(id))).collect();
    if let Some(p) = tgt {
        apply_pack(&mut store, p, &mut taken)?;
        tgt_vocab = Arc::new(p.vocab.clone());
        let code = match p.header.code.as_ref().unwrap_or(&TargetCode::None) {
            TargetCode::Row => {
                let row = p.params.get(CODE_ROW)?.row(0).to_vec();
                let mut emb = store.get(SRC_EMBED)?.clone();
                emb.push_row(&row)?;
                store.rebind(&[(SRC_EMBED, Role::SrcEmbed)], emb);
                let grown = src_vocab.with_lang_code(p.lang())?;
                let id = grown.lang_code(p.lang()).expect("just added");
                src_vocab = Arc::new(grown);
                Some(id)
            }
            TargetCode::Base(tag) => {
                Some(src_vocab.lang_code(tag).ok_or_else(|| Error::MissingLangCode(tag.clone()))?)
            }
            TargetCode::None => None,
        };
        codes = BTreeMap::from([(p.lang().to_string(), code)]);
    }
    store.compact();
    Ok(TranslationModel {
        config: base.config.clone(),
        store: Arc::new(store),
        src_vocab,
        tgt_vocab,
        codes,
        decode: base.decode.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{DecodeConfig, Translator};
    use crate::model::{init_model, Forward, LayerSel};
    use crate::tokenizer::{build_vocabulary, train_bpe, CorpusWeighting};
    use crate::training::{recipe_new_source, recipe_new_target, CodeStrategy, Extra, Variant};

    fn vocab(lines: &[&str], tags: &[&str]) -> Vocabulary {
        let c = BTreeMap::from([("l".to_string(), lines.iter().map(|s| s.to_string()).collect::<Vec<_>>())]);
        let w = CorpusWeighting::from_corpora(&c, 1.0).unwrap();
        let bpe = Arc::new(train_bpe(&c, &w, 20, 0).unwrap());
        build_vocabulary(bpe, &c, 0, &tags.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
    }

    fn config() -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            dropout: 0.0,
            tie_target_embed_and_output: true,
            tie_all_embeddings: true,
        }
    }

    fn base() -> TranslationModel {
        let v = Arc::new(vocab(&["ab ab ba", "ba cd dc"], &["en", "xx"]));
        let s = init_model(&config(), &v, 4).unwrap();
        TranslationModel::new(config(), Arc::new(s), v.clone(), v).with_decode(DecodeConfig::greedy())
    }

    /// Perturbs every trainable parameter so packs differ from the base.
    fn pretend_trained(r: &crate::training::RecipeOutcome, base: &TranslationModel) -> TranslationModel {
        let mut s = r.store.clone();
        for name in &r.freeze.trainable {
            let rows = r.freeze.row_masks.get(name).cloned();
            let t = s.get_mut(name).unwrap();
            let cols = t.cols();
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                if rows.as_ref().is_none_or(|rs| rs.contains(&(i / cols))) {
                    *x += 0.01 * ((i % 7) as f32 - 3.0);
                }
            }
        }
        r.model(base, s)
    }

    fn src_vocab() -> Vocabulary {
        vocab(&["qq ab zz", "zz q"], &["en", "xx"])
    }

    fn tgt_vocab() -> Vocabulary {
        vocab(&["pp rr pp"], &[])
    }

    #[test]
    fn embed_only_source_pack_is_one_matrix() {
        let b = base();
        let r = recipe_new_source(&b, &src_vocab(), &Variant::embed_only(), 1).unwrap();
        let pack = extract_pack(&pretend_trained(&r, &b), &b, PackSide::Source, "zz").unwrap();
        assert_eq!(pack.params.names().collect::<Vec<_>>(), vec![SRC_EMBED]);
        assert_eq!(pack.header.base_fingerprint, fingerprint(&b.store));
    }

    #[test]
    fn target_pack_with_layer_and_adapter() {
        let b = base();
        let variant = Variant::embed_only()
            .with(Extra::Layers(Side::Decoder, LayerSel::Last))
            .with(Extra::Adapters(AdapterSpec::new(Side::Encoder, LayerSel::Last, 8)));
        let r = recipe_new_target(&b, "yy", &tgt_vocab(), &variant, &CodeStrategy::Learned, 1).unwrap();
        let pack = extract_pack(&pretend_trained(&r, &b), &b, PackSide::Target, "yy").unwrap();
        let names: BTreeSet<&str> = pack.params.names().collect();
        let mut expect: BTreeSet<&str> = BTreeSet::from([TGT_EMBED, OUT_PROJ, CODE_ROW]);
        expect.extend(b.store.names().filter(|n| n.starts_with("decoder.layer2.")));
        expect.extend(r.store.names().filter(|n| n.starts_with("encoder.layer2.adapter1.")));
        assert_eq!(names, expect);
        assert!(pack.params.same_array(TGT_EMBED, OUT_PROJ).unwrap());
        assert_eq!(pack.header.code, Some(TargetCode::Row));
        assert_eq!(pack.header.adapter_specs.len(), 1);
        assert_eq!(pack.header.adapter_specs[0].bottleneck, 8);
    }

    #[test]
    fn untrained_store_gives_an_empty_pack_error() {
        let b = base();
        assert!(matches!(extract_pack(&b, &b, PackSide::Source, "xx"), Err(Error::EmptyPack)));
    }

    #[test]
    fn embed_only_composition_touches_only_embeddings() {
        let b = base();
        let rs = recipe_new_source(&b, &src_vocab(), &Variant::embed_only(), 1).unwrap();
        let rt = recipe_new_target(&b, "yy", &tgt_vocab(), &Variant::embed_only(), &CodeStrategy::Learned, 2).unwrap();
        let sp = extract_pack(&pretend_trained(&rs, &b), &b, PackSide::Source, "zz").unwrap();
        let tp = extract_pack(&pretend_trained(&rt, &b), &b, PackSide::Target, "yy").unwrap();
        let before = fingerprint(&b.store);
        let m = compose(&b, Some(&sp), Some(&tp)).unwrap();
        assert_eq!(fingerprint(&b.store), before);
        let differing: BTreeSet<&str> = m.store.names().filter(|n| changed(&b.store, &m.store, n)).collect();
        assert_eq!(differing, BTreeSet::from([SRC_EMBED, TGT_EMBED, OUT_PROJ]));
        let emb = m.store.get(SRC_EMBED).unwrap();
        assert_eq!(emb.rows(), src_vocab().len() + 1);
        assert_eq!(emb.row(emb.rows() - 1), tp.params.get(CODE_ROW).unwrap().row(0));
        assert_eq!(m.codes["yy"], Some(src_vocab().len() as u32));
        assert!(m.translate("qq ab", "yy").is_ok());
        assert!(b.translate("ab ba", "xx").is_ok());
    }

    fn adapter_variant() -> Variant {
        Variant::embed_only().with(Extra::Adapters(AdapterSpec::new(Side::Encoder, LayerSel::Last, 4)))
    }

    #[test]
    fn adapters_from_both_packs_stack_source_first() {
        let b = base();
        let rs = recipe_new_source(&b, &src_vocab(), &adapter_variant(), 1).unwrap();
        let rt = recipe_new_target(&b, "yy", &tgt_vocab(), &adapter_variant(), &CodeStrategy::Learned, 2).unwrap();
        let sp = extract_pack(&pretend_trained(&rs, &b), &b, PackSide::Source, "zz").unwrap();
        let tp = extract_pack(&pretend_trained(&rt, &b), &b, PackSide::Target, "yy").unwrap();
        let m = compose(&b, Some(&sp), Some(&tp)).unwrap();
        assert_eq!(adapter_count(&m.store, Side::Encoder, 2), 2);
        let name = "encoder.layer2.adapter1.up.weight";
        assert!(m.store.get(name).unwrap().bitwise_eq(sp.params.get(name).unwrap()));
        assert!(m.store.get("encoder.layer2.adapter2.up.weight").unwrap().bitwise_eq(tp.params.get(name).unwrap()));

        // Swapping the order changes the encoder output.
        let swapped = compose(&b, Some(&sp), None).unwrap();
        let swapped = {
            let mut s = (*swapped.store).clone();
            for rest in ["norm.gain", "norm.bias", "down.weight", "down.bias", "up.weight", "up.bias"] {
                let n1 = format!("encoder.layer2.adapter1.{rest}");
                let n2 = format!("encoder.layer2.adapter2.{rest}");
                s.insert_shared(&n2, s.shared(&n1).unwrap(), Role::Adapter).unwrap();
                s.rebind_shared(&[(&n1, Role::Adapter)], tp.params.shared(&n1).unwrap());
            }
            s
        };
        let ids = vec![vec![4u32, 7, 2]];
        let enc = |s: &ParameterStore| {
            let mut f = Forward::inference(s, &b.config);
            let (n, _) = f.encode(&ids).unwrap();
            f.graph.value(n).clone()
        };
        assert!(!enc(&m.store).bitwise_eq(&enc(&swapped)));
    }

    #[test]
    fn zero_adapters_compose_to_base_behaviour() {
        let b = base();
        // Same vocabulary, untrained adapters: the pack is adapters only.
        let same = (*b.src_vocab).clone();
        let rs = recipe_new_source(&b, &same, &adapter_variant(), 1).unwrap();
        let sp = extract_pack(&rs.model(&b, rs.store.clone()), &b, PackSide::Source, "zz").unwrap();
        assert!(sp.params.names().all(|n| n.contains("adapter")));
        let m = compose(&b, Some(&sp), None).unwrap();
        for line in ["ab ba", "cd dc ab", "ba"] {
            let a = b.translate_ids(&b.source_ids(line, "xx").unwrap()).unwrap();
            let c = m.translate_ids(&m.source_ids(line, "xx").unwrap()).unwrap();
            assert_eq!(a.tokens, c.tokens);
            assert!((a.score - c.score).abs() < 1e-6);
        }
    }

    #[test]
    fn extract_of_apply_is_identity() {
        let b = base();
        let variant = adapter_variant().with(Extra::NormBias(Side::Decoder));
        let rt = recipe_new_target(&b, "yy", &tgt_vocab(), &variant, &CodeStrategy::Learned, 2).unwrap();
        let tp = extract_pack(&pretend_trained(&rt, &b), &b, PackSide::Target, "yy").unwrap();
        let applied = compose(&b, None, Some(&tp)).unwrap();
        assert_eq!(extract_pack(&applied, &b, PackSide::Target, "yy").unwrap(), tp);

        let rs = recipe_new_source(&b, &src_vocab(), &adapter_variant(), 1).unwrap();
        let sp = extract_pack(&pretend_trained(&rs, &b), &b, PackSide::Source, "zz").unwrap();
        let applied = compose(&b, Some(&sp), None).unwrap();
        assert_eq!(extract_pack(&applied, &b, PackSide::Source, "zz").unwrap(), sp);
    }

    #[test]
    fn conflicts_and_mismatches_are_rejected() {
        let b = base();
        let rs = recipe_new_source(&b, &src_vocab(), &Variant::embed_only().with(Extra::NormBias(Side::Encoder)), 1).unwrap();
        let rt = recipe_new_target(&b, "yy", &tgt_vocab(), &Variant::embed_only().with(Extra::NormBias(Side::Encoder)), &CodeStrategy::FixedEn, 2).unwrap();
        let sp = extract_pack(&pretend_trained(&rs, &b), &b, PackSide::Source, "zz").unwrap();
        let tp = extract_pack(&pretend_trained(&rt, &b), &b, PackSide::Target, "yy").unwrap();
        assert_eq!(tp.header.code, Some(TargetCode::Base("en".into())));
        assert!(matches!(compose(&b, Some(&sp), Some(&tp)), Err(Error::PackConflict(_))));
        assert!(compose(&b, Some(&tp), None).is_err());

        let mut other = (*b.store).clone();
        other.get_mut("encoder.layer1.ffn.w1.bias").unwrap().data_mut()[0] += 1.0;
        let moved = TranslationModel { store: Arc::new(other), ..b.clone() };
        assert!(matches!(compose(&moved, Some(&sp), None), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let b = base();
        save_store(&dir.path().join("s"), &b.store).unwrap();
        let s = load_store(&dir.path().join("s")).unwrap();
        assert!(s.bitwise_eq(&b.store));
        assert!(s.same_array(SRC_EMBED, OUT_PROJ).unwrap());
        assert_eq!(fingerprint(&s), fingerprint(&b.store));

        save_model(&dir.path().join("m"), &b).unwrap();
        let m = load_model(&dir.path().join("m")).unwrap();
        assert!(m.store.bitwise_eq(&b.store));
        assert_eq!(m.src_vocab, b.src_vocab);
        assert_eq!(m.codes, b.codes);
        assert_eq!(m.decode, b.decode);

        let rt = recipe_new_target(&b, "yy", &tgt_vocab(), &adapter_variant(), &CodeStrategy::Learned, 2).unwrap();
        let tp = extract_pack(&pretend_trained(&rt, &b), &b, PackSide::Target, "yy").unwrap();
        save_pack(&dir.path().join("p"), &tp).unwrap();
        assert_eq!(load_pack(&dir.path().join("p")).unwrap(), tp);
        assert!(load_model(&dir.path().join("p")).is_err());
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let b = base();
        save_store(dir.path(), &b.store).unwrap();
        let p = dir.path().join(PAYLOAD);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        // Sorted order puts out_proj last among arrays; its tied names are aliases.
        match load_store(dir.path()) {
            Err(Error::TruncatedPayload { tensor }) => assert_eq!(tensor, OUT_PROJ),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&p, [bytes.as_slice(), &[0, 0, 0, 0]].concat()).unwrap();
        assert!(matches!(load_store(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_store(dir.path(), &base().store).unwrap();
        let m = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&m).unwrap().replacen("\"version\": 1", "\"version\": 9", 1);
        fs::write(&m, text).unwrap();
        assert!(matches!(load_store(dir.path()), Err(Error::UnsupportedVersion(9))));
    }
}
