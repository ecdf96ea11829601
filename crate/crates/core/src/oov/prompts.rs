//! Versioned prompt templates for the describer and proposer.

pub const DESCRIBER_PROMPT_V1: &str = include_str!("../../assets/prompts/describer.v1.txt");
pub const PROPOSER_TEMPLATE_V1: &str = include_str!("../../assets/prompts/proposer.v1.txt");

pub const SCENE_PLACEHOLDER: &str = "{scene}";

pub fn describer_prompt() -> &'static str {
    DESCRIBER_PROMPT_V1
}

/// The proposer template with `scene` substituted for the placeholder.
pub fn render_proposer_prompt(scene: &str) -> String {
    PROPOSER_TEMPLATE_V1.replace(SCENE_PLACEHOLDER, scene)
}
