use std::path::Path;

use synthedit_core::metrics::{render_geval_prompt, GEvalConfig};
use synthedit_core::prompts::{render_edit, render_geval};
use synthedit_core::synthesis::{render_edit_prompt, SynthesisConfig};
use synthedit_core::Document;

fn fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(path).expect("fixture readable")
}

#[test]
fn edit_prompt_matches_golden_file() {
    assert_eq!(render_edit("ARTICLE_SENTINEL", "REFERENCE_SENTINEL"), fixture("edit_prompt.txt"));
}

#[test]
fn judge_prompt_matches_golden_file() {
    assert_eq!(
        render_geval("ARTICLE_SENTINEL", "REFERENCE_SENTINEL", "OUTPUT_SENTINEL"),
        fixture("geval_prompt.txt")
    );
}

#[test]
fn request_carries_rendered_prompt_verbatim() {
    let doc = Document::new("d", "ARTICLE_SENTINEL", "REFERENCE_SENTINEL");
    let req = render_edit_prompt(&doc, &SynthesisConfig::default());
    assert_eq!(req.user_content(), Some(fixture("edit_prompt.txt").as_str()));
    assert_eq!(req.temperature, 1.0);

    let judge = render_geval_prompt("ARTICLE_SENTINEL", "REFERENCE_SENTINEL", "OUTPUT_SENTINEL", &GEvalConfig::default());
    assert_eq!(judge.user_content(), Some(fixture("geval_prompt.txt").as_str()));
    assert_eq!(judge.temperature, 0.0);
}

#[test]
fn placeholders_are_substituted_literally() {
    // Braces and dollar signs in clinical text must survive untouched.
    let article = "Dose {article} $1 \\n";
    let out = render_edit(article, "{reference}");
    assert!(out.contains(article));
    assert!(out.contains("{reference}"));
    assert_eq!(out.matches(article).count(), 1);
}
