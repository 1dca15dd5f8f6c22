//! Defect-aware prompt sets: every phrase of a state crossed with every template.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kba::{Kba, CLS_TOKEN, NORMAL_STATE, TEMPLATE_SLOT};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub state_id: String,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub product: String,
    pub prompts: Vec<String>,
}

/// Text substituted for `[cls]`: the product key with underscores as spaces.
pub fn product_text(product: &str) -> String {
    product.replace('_', " ")
}

/// Builds the prompt set of one state, phrase-major and template-minor.
pub fn build_prompt_set(kba: &Kba, product: &str, state_id: &str) -> Result<PromptSet> {
    kba.product(product)?;
    let phrases = if state_id == NORMAL_STATE {
        &kba.normal_phrases
    } else {
        &kba.defect(state_id)?.phrases
    };
    let cls = product_text(product);
    let mut prompts = Vec::with_capacity(phrases.len() * kba.templates.len());
    for phrase in phrases {
        let filled = phrase.replacen(CLS_TOKEN, &cls, 1);
        for template in &kba.templates {
            prompts.push(template.replacen(TEMPLATE_SLOT, &filled, 1));
        }
    }
    Ok(PromptSet {
        state_id: state_id.to_string(),
        product: product.to_string(),
        prompts,
    })
}

/// `normal` followed by every defect id, or only the product-relevant ones.
pub fn build_state_roster(kba: &Kba, product: &str, filtered: bool) -> Result<Vec<String>> {
    let mut roster = vec![NORMAL_STATE.to_string()];
    if filtered {
        roster.extend(kba.relevant_defects(product)?.into_iter().map(String::from));
    } else {
        kba.product(product)?;
        roster.extend(kba.defect_ids().map(String::from));
    }
    Ok(roster)
}

/// Prompt sets for a whole roster, in roster order.
pub fn build_all(kba: &Kba, product: &str, filtered: bool) -> Result<Vec<PromptSet>> {
    build_state_roster(kba, product, filtered)?
        .iter()
        .map(|s| build_prompt_set(kba, product, s))
        .collect()
}
