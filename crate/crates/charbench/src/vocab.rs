use serde::{Deserialize, Serialize};

pub const OBJECTS: [&str; 8] = [
    "tree", "river", "man", "woman", "dog", "cat", "love", "hate",
];

pub const STYLES: [&str; 8] = [
    "cubist",
    "surrealism",
    "action painting",
    "high renaissance",
    "impressionism",
    "cyberpunk",
    "unreal engine",
    "VSCO",
];

pub const SPECIFIC: [&str; 8] = [
    "vivid color",
    "subtle color",
    "rough texture",
    "smooth texture",
    "fine line",
    "thick line",
    "curvy shape",
    "angular shape",
];

/// Kind of attribute a sweep adds to an image. Also the slot order used when
/// composing prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeType {
    Objects,
    Styles,
    Specific,
}

impl AttributeType {
    pub const ALL: [AttributeType; 3] = [
        AttributeType::Objects,
        AttributeType::Styles,
        AttributeType::Specific,
    ];

    pub fn vocabulary(self) -> &'static [&'static str] {
        match self {
            AttributeType::Objects => &OBJECTS,
            AttributeType::Styles => &STYLES,
            AttributeType::Specific => &SPECIFIC,
        }
    }

    pub fn contains(self, attribute: &str) -> bool {
        self.vocabulary().contains(&attribute)
    }

    /// Attribute types a prompt needs besides this one: objects need a
    /// style, styles need an object, specific attributes need both.
    pub fn context_types(self) -> &'static [AttributeType] {
        match self {
            AttributeType::Objects => &[AttributeType::Styles],
            AttributeType::Styles => &[AttributeType::Objects],
            AttributeType::Specific => &[AttributeType::Objects, AttributeType::Styles],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeType::Objects => "objects",
            AttributeType::Styles => "styles",
            AttributeType::Specific => "specific",
        }
    }
}
