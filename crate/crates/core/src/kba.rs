//! Knowledge base for anomalies: defect superclasses, their dataset-specific
//! variations, defect-aware phrases, and which defects apply to which product.
//!
//! Five knowledge bases ship with the crate (see [`bundled`]); custom ones are
//! loaded from JSON with [`Kba::load`].

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder replaced by the product name inside phrases.
pub const CLS_TOKEN: &str = "[cls]";
/// Placeholder replaced by a filled phrase inside templates.
pub const TEMPLATE_SLOT: &str = "{}";
/// State id of the defect-free state. Always channel 0.
pub const NORMAL_STATE: &str = "normal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectType {
    #[serde(rename = "superclass")]
    pub superclass_name: String,
    #[serde(default)]
    pub variations: Vec<String>,
    pub phrases: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductClass {
    #[serde(rename = "defects")]
    pub relevant_defect_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Kba {
    pub normal_phrases: Vec<String>,
    pub templates: Vec<String>,
    pub defect_types: IndexMap<String, DefectType>,
    pub products: IndexMap<String, ProductClass>,
    /// normalized variation / superclass / id -> defect id
    #[serde(skip)]
    lookup: HashMap<String, String>,
}

/// Lowercases, maps `_` and `-` to spaces and collapses runs of whitespace.
pub fn normalize_term(term: &str) -> String {
    term.to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl Kba {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        if text.starts_with('\u{feff}') {
            return Err(Error::Parse("UTF-8 byte order mark is not allowed".into()));
        }
        let raw = check_duplicate_keys(text)?;
        let mut kba: Kba = serde_json::from_value(raw).map_err(|e| Error::Parse(e.to_string()))?;
        kba.validate()?;
        Ok(kba)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("KBA serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Checks every invariant and rebuilds the variation index.
    pub fn validate(&mut self) -> Result<()> {
        if self.normal_phrases.is_empty() {
            return Err(Error::Validation("normal_phrases is empty".into()));
        }
        for p in &self.normal_phrases {
            check_placeholder(p, CLS_TOKEN, "normal phrase")?;
        }
        if self.templates.is_empty() {
            return Err(Error::Validation("templates is empty".into()));
        }
        for t in &self.templates {
            check_placeholder(t, TEMPLATE_SLOT, "template")?;
        }

        let mut lookup: HashMap<String, String> = HashMap::new();
        for (id, defect) in &self.defect_types {
            if id == NORMAL_STATE {
                return Err(Error::Validation(format!(
                    "defect id `{id}` collides with the normal state"
                )));
            }
            if defect.phrases.is_empty() {
                return Err(Error::Validation(format!("defect `{id}` has no phrases")));
            }
            for p in &defect.phrases {
                check_placeholder(p, CLS_TOKEN, &format!("phrase of defect `{id}`"))?;
            }
            let mut seen = Vec::new();
            for v in &defect.variations {
                let n = normalize_term(v);
                if seen.contains(&n) {
                    return Err(Error::Validation(format!(
                        "duplicate variation `{v}` in defect `{id}`"
                    )));
                }
                seen.push(n);
            }
            let keys = std::iter::once(normalize_term(id))
                .chain(std::iter::once(normalize_term(&defect.superclass_name)))
                .chain(seen);
            for key in keys {
                match lookup.get(&key) {
                    Some(other) if other != id => {
                        return Err(Error::Validation(format!(
                            "term `{key}` is ambiguous between defects `{other}` and `{id}`"
                        )));
                    }
                    _ => {
                        lookup.insert(key, id.clone());
                    }
                }
            }
        }

        for (name, product) in &self.products {
            let mut seen = Vec::new();
            for d in &product.relevant_defect_ids {
                if !self.defect_types.contains_key(d) {
                    return Err(Error::Validation(format!(
                        "product `{name}` references unknown defect id `{d}`"
                    )));
                }
                if seen.contains(&d) {
                    return Err(Error::Validation(format!(
                        "product `{name}` lists defect `{d}` twice"
                    )));
                }
                seen.push(d);
            }
        }
        self.lookup = lookup;
        Ok(())
    }

    /// Maps a dataset defect name (e.g. `scratch_neck`) to its superclass id.
    pub fn resolve_superclass(&self, variation: &str) -> Result<&str> {
        let key = normalize_term(variation);
        self.lookup
            .get(&key)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownVariation(variation.to_string()))
    }

    /// Relevant defect ids for `product`, in the knowledge base's defect order.
    pub fn relevant_defects(&self, product: &str) -> Result<Vec<&str>> {
        let p = self.product(product)?;
        Ok(self
            .defect_types
            .keys()
            .filter(|id| p.relevant_defect_ids.contains(id))
            .map(String::as_str)
            .collect())
    }

    pub fn product(&self, name: &str) -> Result<&ProductClass> {
        self.products
            .get(name)
            .ok_or_else(|| Error::UnknownProduct(name.to_string()))
    }

    pub fn defect(&self, id: &str) -> Result<&DefectType> {
        self.defect_types
            .get(id)
            .ok_or_else(|| Error::UnknownState(id.to_string()))
    }

    pub fn defect_ids(&self) -> impl Iterator<Item = &str> {
        self.defect_types.keys().map(String::as_str)
    }
}

fn check_placeholder(s: &str, token: &str, what: &str) -> Result<()> {
    match s.matches(token).count() {
        1 => Ok(()),
        n => Err(Error::Validation(format!(
            "{what} `{s}` must contain `{token}` exactly once (found {n})"
        ))),
    }
}

/// serde_json silently keeps the last of duplicated object keys; the loader
/// must reject them, so the document is walked once with a key-tracking visitor.
fn check_duplicate_keys(text: &str) -> Result<serde_json::Value> {
    use serde::de::{self, DeserializeSeed, MapAccess, SeqAccess, Visitor};
    use serde_json::{Map, Value};

    struct Strict;

    impl<'de> DeserializeSeed<'de> for Strict {
        type Value = Value;
        fn deserialize<D: de::Deserializer<'de>>(self, d: D) -> Result<Value, D::Error> {
            d.deserialize_any(self)
        }
    }

    impl<'de> Visitor<'de> for Strict {
        type Value = Value;
        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a JSON value")
        }
        fn visit_bool<E>(self, v: bool) -> Result<Value, E> {
            Ok(Value::Bool(v))
        }
        fn visit_i64<E>(self, v: i64) -> Result<Value, E> {
            Ok(v.into())
        }
        fn visit_u64<E>(self, v: u64) -> Result<Value, E> {
            Ok(v.into())
        }
        fn visit_f64<E>(self, v: f64) -> Result<Value, E> {
            Ok(serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number))
        }
        fn visit_str<E>(self, v: &str) -> Result<Value, E> {
            Ok(Value::String(v.to_string()))
        }
        fn visit_string<E>(self, v: String) -> Result<Value, E> {
            Ok(Value::String(v))
        }
        fn visit_unit<E>(self) -> Result<Value, E> {
            Ok(Value::Null)
        }
        fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
            let mut out = Vec::new();
            while let Some(v) = seq.next_element_seed(Strict)? {
                out.push(v);
            }
            Ok(Value::Array(out))
        }
        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Value, A::Error> {
            let mut out = Map::new();
            while let Some(key) = map.next_key::<String>()? {
                if out.contains_key(&key) {
                    return Err(de::Error::custom(format!("duplicate key `{key}`")));
                }
                let v = map.next_value_seed(Strict)?;
                out.insert(key, v);
            }
            Ok(Value::Object(out))
        }
    }

    let mut de = serde_json::Deserializer::from_str(text);
    let value = Strict.deserialize(&mut de).map_err(|e| {
        if e.to_string().contains("duplicate key") {
            Error::Validation(e.to_string())
        } else {
            Error::Parse(e.to_string())
        }
    })?;
    de.end().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(value)
}

/// Knowledge bases shipped with the crate.
pub mod bundled {
    use super::Kba;
    use crate::error::{Error, Result};

    pub const NAMES: [&str; 5] = ["mvtec", "visa", "mpdd", "mad", "realiad"];

    pub fn source(name: &str) -> Option<&'static str> {
        Some(match name {
            "mvtec" => include_str!("../assets/kba/mvtec.json"),
            "visa" => include_str!("../assets/kba/visa.json"),
            "mpdd" => include_str!("../assets/kba/mpdd.json"),
            "mad" => include_str!("../assets/kba/mad.json"),
            "realiad" => include_str!("../assets/kba/realiad.json"),
            _ => return None,
        })
    }

    pub fn load(name: &str) -> Result<Kba> {
        let src = source(name)
            .ok_or_else(|| Error::Config(format!("no bundled knowledge base named `{name}`")))?;
        Kba::from_json(src)
    }
}
