//! Prompt templates for edit synthesis and LLM-judge factuality scoring.
//!
//! Both templates are kept verbatim, original spelling included
//! ("Numbererd", "notee"). Placeholders are substituted in a single pass,
//! so placeholder-like text inside the inserted documents is never expanded.

/// Hallucination-edit prompt. Placeholders: `{src}`, `{ref}`.
pub const EDIT_PROMPT_TEMPLATE: &str = "\
»»»» Instruction »»»»
You are a clinical writing assistant who is in edit mode. You are tasked with generating hallucinated summary based on provided a clinical note article and a reference summary for the article. The goal is to edit the reference summary to generate a hallucinated summary that sounds plausible but includes edits introduced through an edit operation which can be one of the following:
Add Operation: Intentionally add medico-legally essential words from the article not required for accurate diagnosis and treatment documentation.
Omit Operation: Intentionally omit medico-legally essential words in the reference summary required for accurate diagnosis and treatment documentation.

For these operations focus on words that, if missing or incorrect in the hallucinated summary, could lead to wrong diagnoses and treatments in the future. Maintain coherence while excluding essential terms. The hallucinated summary should be concise and contain no more than FIVE EXTRA WORDS compared to the reference summary and should have an equal number of Add/Omit operations.

Steps for generating the hallucinated summary:
Step 1: List the proposed edit operations to introduce hallucination on the reference summary.
Step 2: Use the proposed edit operations to edit the reference summary.

»»»» Output Format »»»»
The output format is:
Numbererd List hallucination edits made:
{Edit 1}, {Edit 2}, {Edit 3} ...
Hallucinated Summary:

»»»» Follow the above Instructions, Hallucination Method and Output Format »»»»
Now, let's start.
Generate the hallucinated summary:
Article - {src}
Reference Summary - {ref}";

/// Factual-consistency judge prompt. Placeholders: `{Document}`,
/// `{Reference Summary }`, `{System Output Summary}`.
pub const GEVAL_PROMPT_TEMPLATE: &str = "\
You will be given one discharge summary written for a Clinical Note.
Your task is to rate the summary on one metric.
Please make sure you read and understand these instructions carefully. Please keep this document open while reviewing, and refer to it as needed.
Evaluation Criteria:
Factual Consistency (1-10): Is the summary has missing or incorrect facts that are not supported by the source text and could lead to wrong diagnoses and treatments?
Evaluation Steps:
1. Read the clinical note carefully and identify the main topic and key points.
2. Read the discharge summary and compare it to the clinical notee. Check if the summary covers the main topic and key points of the  clinical note, and Is the summary has missing or incorrect facts that are not supported by the source text and could lead to wrong diagnoses and treatments?
3. Assign a score for Factual Consistency on a scale of 1 to 10, where 1 is the lowest and 10 is the highest based on the Evaluation Criteria.
Clinical Note Text:
{Document}
Reference Discharge Summary:
{Reference Summary }
System Output Discharge Summary:
{System Output Summary}

Return the scores as dictionary objects, adhering to the following structure:
{\"Factual Consistency\": ...}
Please provide your response solely in the dictionary format without including any additional text.";

pub const EDIT_PLACEHOLDERS: [&str; 2] = ["{src}", "{ref}"];
pub const GEVAL_PLACEHOLDERS: [&str; 3] = [
    "{Document}",
    "{Reference Summary }",
    "{System Output Summary}",
];

/// Replaces each placeholder (in order of appearance in `template`) with
/// its value. Placeholders not listed in `values` are left untouched.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    loop {
        let next = values
            .iter()
            .filter_map(|(key, value)| rest.find(key).map(|pos| (pos, *key, *value)))
            .min_by_key(|(pos, _, _)| *pos);
        match next {
            Some((pos, key, value)) => {
                out.push_str(&rest[..pos]);
                out.push_str(value);
                rest = &rest[pos + key.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

pub fn render_edit(article: &str, reference: &str) -> String {
    render(EDIT_PROMPT_TEMPLATE, &[("{src}", article), ("{ref}", reference)])
}

pub fn render_geval(article: &str, reference: &str, system_output: &str) -> String {
    render(
        GEVAL_PROMPT_TEMPLATE,
        &[
            ("{Document}", article),
            ("{Reference Summary }", reference),
            ("{System Output Summary}", system_output),
        ],
    )
}

/// Recovers `(article, reference)` from a rendered edit prompt.
pub fn extract_edit_inputs(prompt: &str) -> Option<(String, String)> {
    let (_, tail) = prompt.split_once("\nArticle - ")?;
    let (article, reference) = tail.rsplit_once("\nReference Summary - ")?;
    Some((article.to_owned(), reference.to_owned()))
}

/// Recovers `(article, reference, system_output)` from a rendered judge prompt.
pub fn extract_geval_inputs(prompt: &str) -> Option<(String, String, String)> {
    let (_, tail) = prompt.split_once("Clinical Note Text:\n")?;
    let (article, tail) = tail.split_once("\nReference Discharge Summary:\n")?;
    let (reference, tail) = tail.split_once("\nSystem Output Discharge Summary:\n")?;
    let (system, _) = tail.rsplit_once("\n\nReturn the scores as dictionary objects")?;
    Some((article.to_owned(), reference.to_owned(), system.to_owned()))
}
