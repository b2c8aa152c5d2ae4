use std::path::PathBuf;

use tardis_core::prompt::{Bindings, TemplateId};

pub const DOMAINS: [&str; 4] = ["banking", "daily_life", "question_type", "generic"];

pub fn bindings(id: TemplateId) -> Bindings {
    let b = Bindings::new();
    match id {
        TemplateId::ClassDescription => b
            .text("target_class_name", "card_arrival")
            .list("target_seed_data", ["When will my card arrive?", "My card still has not come."]),
        TemplateId::ContextualizingText => b
            .text("data", "card_arrival")
            .text("class_description", "Questions about when a new card will be delivered.")
            .text("target_seed_example", "When will my card arrive?"),
        TemplateId::SegGenerate => b
            .text("target_class", "card_arrival")
            .text("target_seed_example", "When will my card arrive?")
            .text("contextualizing_text", "Ask while travelling abroad."),
        TemplateId::DiscriminativeText => b
            .text("target_class_name", "card_arrival")
            .list("target_seed_data", ["When will my card arrive?"])
            .text("ambiguous_class_name", "card_delivery_estimate")
            .list("ambiguous_seed_data", ["How long does card delivery take?"]),
        TemplateId::CegGenerate => b
            .text("target_class_name", "card_arrival")
            .list("target_seed_data", ["When will my card arrive?"])
            .text("ambiguous_class_name", "card_delivery_estimate")
            .list("ambiguous_seed_data", ["How long does card delivery take?"])
            .text("discriminative_text", "One tracks an ordered card, the other asks for typical times."),
        TemplateId::Verification => b
            .text(
                "verification_shots",
                "text: When will my card arrive? class: card_arrival\ntext: How long does delivery take? class: card_delivery_estimate",
            )
            .text("target_text", "Where is my new card?"),
        TemplateId::Modification => b
            .text("target_class", "card_arrival")
            .list("target_class_data", ["When will my card arrive?"])
            .text("discriminative_text", "One tracks an ordered card, the other asks for typical times.")
            .text("verification_result_class", "card_delivery_estimate")
            .text("generated_example", "How many days does shipping usually take?"),
    }
}

pub fn anchors(domain: &str, id: TemplateId) -> &'static [&'static str] {
    let trec = domain == "question_type";
    match id {
        TemplateId::ClassDescription => &["Describe this class in one sentence"],
        TemplateId::ContextualizingText if trec => &["suggest five ideas"],
        TemplateId::ContextualizingText => &["suggest a specific idea"],
        TemplateId::SegGenerate if trec => &["generate new data for"],
        TemplateId::SegGenerate => &["Give me five new modified texts"],
        TemplateId::DiscriminativeText if trec => &["Focus on the answer type, and tell me the main difference"],
        TemplateId::DiscriminativeText => &["Tell me the main difference"],
        TemplateId::CegGenerate if trec => &["generate five new texts"],
        TemplateId::CegGenerate => &["could be confused with"],
        TemplateId::Verification => &["text: Where is my new card? class:"],
        TemplateId::Modification => &["Modify this query text to be suitable for"],
    }
}

pub fn golden_path(domain: &str, id: TemplateId) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(domain)
        .join(format!("{}.txt", id.as_str()))
}
