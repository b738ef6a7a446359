use serde::{Deserialize, Serialize};

use crate::vocab::AttributeType;

/// One attribute per slot; `None` leaves the slot out.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptParts {
    pub object: Option<String>,
    pub style: Option<String>,
    pub specific: Option<String>,
}

impl PromptParts {
    pub fn slot(&self, kind: AttributeType) -> Option<&str> {
        match kind {
            AttributeType::Objects => self.object.as_deref(),
            AttributeType::Styles => self.style.as_deref(),
            AttributeType::Specific => self.specific.as_deref(),
        }
    }

    pub fn with(&self, kind: AttributeType, value: impl Into<String>) -> Self {
        let mut out = self.clone();
        let v = Some(value.into());
        match kind {
            AttributeType::Objects => out.object = v,
            AttributeType::Styles => out.style = v,
            AttributeType::Specific => out.specific = v,
        }
        out
    }

    pub fn compose(&self) -> Option<String> {
        compose_prompt(
            self.object.as_deref(),
            self.style.as_deref(),
            self.specific.as_deref(),
        )
    }
}

/// Joins the present attributes with `", "` in object, style, specific
/// order. Returns `None` when every slot is empty.
pub fn compose_prompt(
    object: Option<&str>,
    style: Option<&str>,
    specific: Option<&str>,
) -> Option<String> {
    let parts: Vec<&str> = [object, style, specific].into_iter().flatten().collect();
    (!parts.is_empty()).then(|| parts.join(", "))
}

/// Textual concatenation of two attributes of the same kind.
pub fn mix_phrase(original: &str, additional: &str) -> String {
    format!("the mix of {original} and {additional}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composes_in_slot_order() {
        assert_eq!(
            compose_prompt(Some("dog"), Some("impressionism"), None).unwrap(),
            "dog, impressionism"
        );
        assert_eq!(compose_prompt(Some("dog"), None, None).unwrap(), "dog");
        assert_eq!(
            compose_prompt(Some("tree"), Some("cubist"), Some("fine line")).unwrap(),
            "tree, cubist, fine line"
        );
        assert_eq!(compose_prompt(None, None, None), None);
    }

    #[test]
    fn concatenation_fills_the_target_slot() {
        let parts = PromptParts::default()
            .with(AttributeType::Styles, "impressionism")
            .with(AttributeType::Objects, mix_phrase("cat", "dog"));
        assert_eq!(
            parts.compose().unwrap(),
            "the mix of cat and dog, impressionism"
        );
    }
}
