use pigment_charbench::prompt::{compose_prompt, mix_phrase, PromptParts};
use pigment_charbench::vocab::{AttributeType, OBJECTS, SPECIFIC, STYLES};

#[test]
fn vocabularies_are_the_published_lists() {
    assert_eq!(OBJECTS.join("|"), "tree|river|man|woman|dog|cat|love|hate");
    assert_eq!(
        STYLES.join("|"),
        "cubist|surrealism|action painting|high renaissance|impressionism|cyberpunk|unreal engine|VSCO"
    );
    assert_eq!(
        SPECIFIC.join("|"),
        "vivid color|subtle color|rough texture|smooth texture|fine line|thick line|curvy shape|angular shape"
    );
}

#[test]
fn prompts_follow_object_style_specific_order() {
    assert_eq!(
        compose_prompt(Some("dog"), Some("impressionism"), None).as_deref(),
        Some("dog, impressionism")
    );
    assert_eq!(
        compose_prompt(Some("dog"), None, None).as_deref(),
        Some("dog")
    );
    let parts = PromptParts::default()
        .with(AttributeType::Specific, "fine line")
        .with(AttributeType::Styles, "VSCO")
        .with(AttributeType::Objects, "river");
    assert_eq!(parts.compose().as_deref(), Some("river, VSCO, fine line"));
    let concat = PromptParts::default()
        .with(AttributeType::Objects, mix_phrase("cat", "dog"))
        .with(AttributeType::Styles, "impressionism");
    assert_eq!(
        concat.compose().as_deref(),
        Some("the mix of cat and dog, impressionism")
    );
}

#[test]
fn context_types_cover_the_other_slots() {
    assert_eq!(
        AttributeType::Objects.context_types(),
        [AttributeType::Styles]
    );
    assert_eq!(
        AttributeType::Styles.context_types(),
        [AttributeType::Objects]
    );
    assert_eq!(
        AttributeType::Specific.context_types(),
        [AttributeType::Objects, AttributeType::Styles]
    );
}
