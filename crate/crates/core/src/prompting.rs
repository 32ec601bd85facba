//! Prompt serialization and label parsing.
//!
//! An in-context instance renders as
//!
//! ```text
//! demo_1 <example_sep> ... demo_M <example_sep> input <io_sep>
//! ```
//!
//! where each demonstration is `text <io_sep> labels`. With no
//! demonstrations this is exactly the plain `input <io_sep>` form used for
//! prompt-based fine-tuning. Labels are always serialized in canonical
//! (sorted) order joined by `label_sep`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::sampling::Demonstrations;

/// Marker appended to one-shot prompts for span-infilling models.
pub const MISSING_SPAN_MARKER: &str = "<extra_id_0>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlongPolicy {
    /// Drop whole demonstrations, oldest first, until the prompt fits.
    #[default]
    TruncateFront,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub example_sep: String,
    pub io_sep: String,
    pub label_sep: String,
    pub eos_marker: String,
    pub max_tokens: usize,
    pub overlong: OverlongPolicy,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            example_sep: "\n###\n".into(),
            io_sep: "\n=>\n".into(),
            label_sep: "; ".into(),
            eos_marker: "</s>".into(),
            max_tokens: 1024,
            overlong: OverlongPolicy::TruncateFront,
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        let seps = [&self.example_sep, &self.io_sep, &self.label_sep, &self.eos_marker];
        for (i, a) in seps.iter().enumerate() {
            if a.trim().is_empty() {
                return Err(Error::TemplateError(format!("separator {i} is blank")));
            }
            for b in &seps[i + 1..] {
                if a == b {
                    return Err(Error::TemplateError(format!("separator {a:?} used twice")));
                }
            }
        }
        if self.example_sep.trim() == self.io_sep.trim() {
            return Err(Error::TemplateError("example_sep and io_sep share a core".into()));
        }
        if self.max_tokens < 16 {
            return Err(Error::TemplateError(format!(
                "max_tokens must be at least 16, got {}",
                self.max_tokens
            )));
        }
        Ok(())
    }

    /// Whitespace-trimmed core of the example separator (the token a
    /// whitespace tokenizer sees).
    pub fn example_sep_token(&self) -> &str {
        self.example_sep.trim()
    }

    pub fn io_sep_token(&self) -> &str {
        self.io_sep.trim()
    }

    pub fn label_sep_core(&self) -> &str {
        let core = self.label_sep.trim();
        if core.is_empty() {
            &self.label_sep
        } else {
            core
        }
    }

    /// Escape separator substrings in `text` so a rendered prompt can be
    /// split back unambiguously. Backslashes are escaped first, which keeps
    /// the mapping injective.
    pub fn sanitize(&self, text: &str) -> String {
        let mut out = text.replace('\\', "\\\\");
        for core in [self.example_sep_token(), self.io_sep_token()] {
            let mut chars = core.chars();
            if let Some(first) = chars.next() {
                let escaped = format!("{first}\\{}", chars.as_str());
                out = out.replace(core, &escaped);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedInstance {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub token_length: usize,
    /// Demonstrations removed to satisfy `max_tokens`.
    #[serde(default)]
    pub dropped_demos: usize,
    /// Still longer than `max_tokens` after truncation.
    #[serde(default)]
    pub overlong: bool,
}

/// Whitespace token count, the length measure used for `max_tokens`.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Join `labels` in canonical order, rejecting labels outside `label_set`.
pub fn serialize_labels(
    labels: &BTreeSet<String>,
    label_set: &[String],
    template: &PromptTemplate,
) -> Result<String> {
    if let Some(bad) = labels.iter().find(|l| !label_set.contains(l)) {
        return Err(Error::UnknownLabel(bad.clone()));
    }
    Ok(join_labels(labels, template))
}

fn join_labels(labels: &BTreeSet<String>, template: &PromptTemplate) -> String {
    labels
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(&template.label_sep)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    /// Fragments that match no known label.
    pub hallucinated: usize,
    /// Known labels generated more than once.
    pub duplicates: usize,
}

impl ParseDiagnostics {
    pub fn merge(&mut self, other: &ParseDiagnostics) {
        self.hallucinated += other.hallucinated;
        self.duplicates += other.duplicates;
    }
}

/// Recover a label set from generated text. Never fails; unknown fragments
/// are dropped and counted.
pub fn parse_labels(
    generated: &str,
    label_set: &[String],
    template: &PromptTemplate,
) -> (BTreeSet<String>, ParseDiagnostics) {
    let cleaned = if template.eos_marker.is_empty() {
        generated.to_string()
    } else {
        generated.replace(&template.eos_marker, " ")
    };
    let mut labels = BTreeSet::new();
    let mut diag = ParseDiagnostics::default();
    for fragment in cleaned.split(template.label_sep_core()) {
        let fragment = fragment.trim();
        if fragment.is_empty() {
            continue;
        }
        if label_set.iter().any(|l| l == fragment) {
            if !labels.insert(fragment.to_string()) {
                diag.duplicates += 1;
            }
        } else {
            diag.hallucinated += 1;
        }
    }
    (labels, diag)
}

fn render_demo(text: &str, labels: &BTreeSet<String>, template: &PromptTemplate) -> String {
    format!("{}{}{}", template.sanitize(text), template.io_sep, join_labels(labels, template))
}

fn assemble(demos: &[String], query: &str, template: &PromptTemplate) -> String {
    let mut prompt = String::new();
    for d in demos {
        prompt.push_str(d);
        prompt.push_str(&template.example_sep);
    }
    prompt.push_str(query);
    prompt
}

fn fit(
    demos: Vec<String>,
    query: String,
    target: Option<String>,
    template: &PromptTemplate,
) -> Result<RenderedInstance> {
    let query_len = token_count(&query);
    let sep_len = token_count(&template.example_sep);
    let demo_lens: Vec<usize> = demos.iter().map(|d| token_count(d) + sep_len).collect();
    let mut total: usize = query_len + demo_lens.iter().sum::<usize>();
    let mut dropped = 0;
    if total > template.max_tokens {
        if template.overlong == OverlongPolicy::Error {
            return Err(Error::OverlongPrompt {
                tokens: total,
                max_tokens: template.max_tokens,
            });
        }
        while total > template.max_tokens && dropped < demos.len() {
            total -= demo_lens[dropped];
            dropped += 1;
        }
    }
    let prompt = assemble(&demos[dropped..], &query, template);
    debug_assert_eq!(token_count(&prompt), total);
    Ok(RenderedInstance {
        prompt,
        target,
        token_length: total,
        dropped_demos: dropped,
        overlong: total > template.max_tokens,
    })
}

/// Render an in-context instance: demonstrations, then the input.
pub fn render_ict_instance(
    demos: &Demonstrations,
    input: &Example,
    template: &PromptTemplate,
) -> Result<RenderedInstance> {
    let rendered: Vec<String> = demos
        .pairs
        .iter()
        .map(|(t, l)| render_demo(t, l, template))
        .collect();
    let query = format!("{}{}", template.sanitize(&input.text), template.io_sep);
    fit(rendered, query, Some(join_labels(&input.labels, template)), template)
}

/// Render the plain `x => y` form.
pub fn render_pft_instance(input: &Example, template: &PromptTemplate) -> Result<RenderedInstance> {
    render_ict_instance(&Demonstrations::default(), input, template)
}

/// One-shot prompt for a model that predicts the label as a missing span.
pub fn render_span_infill_instance(
    demos: &Demonstrations,
    input: &Example,
    template: &PromptTemplate,
) -> Result<RenderedInstance> {
    let rendered: Vec<String> = demos
        .pairs
        .iter()
        .map(|(t, l)| render_demo(t, l, template))
        .collect();
    let query = format!(
        "{}{}{}",
        template.sanitize(&input.text),
        template.io_sep,
        MISSING_SPAN_MARKER
    );
    fit(rendered, query, Some(join_labels(&input.labels, template)), template)
}

#[derive(Serialize)]
struct ExportRow<'a> {
    prompt: &'a str,
    target: Option<&'a str>,
}

/// Write instances as JSONL `{prompt, target}` rows.
pub fn export_instances(path: &Path, instances: &[RenderedInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for inst in instances {
        let row = ExportRow {
            prompt: &inst.prompt,
            target: inst.target.as_deref(),
        };
        let line = serde_json::to_string(&row).map_err(|e| Error::json("instance export", e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn t() -> PromptTemplate {
        PromptTemplate::default()
    }

    #[test]
    fn one_demo_expansion() {
        let demos = Demonstrations {
            origin_lang: "en".into(),
            pairs: vec![("good pasta".into(), set(&["food"]))],
            indices: vec![0],
        };
        let input = Example::new("rude waiter", ["service"], "en");
        let r = render_ict_instance(&demos, &input, &t()).unwrap();
        assert_eq!(r.prompt, "good pasta\n=>\nfood\n###\nrude waiter\n=>\n");
        assert_eq!(r.target.as_deref(), Some("service"));
    }

    #[test]
    fn pft_form() {
        let input = Example::new("rude waiter", ["service"], "en");
        let r = render_pft_instance(&input, &t()).unwrap();
        assert_eq!(r.prompt, "rude waiter\n=>\n");
        assert_eq!(r.target.as_deref(), Some("service"));
        assert_eq!(r.token_length, 3);
    }

    #[test]
    fn empty_context_equals_pft() {
        let input = Example::new("rude waiter", ["service"], "en");
        assert_eq!(
            render_ict_instance(&Demonstrations::empty("en"), &input, &t()).unwrap(),
            render_pft_instance(&input, &t()).unwrap()
        );
    }

    #[test]
    fn serialize_sorts_and_checks() {
        let ls = vec!["food".to_string(), "service".to_string()];
        assert_eq!(serialize_labels(&set(&["service"]), &ls, &t()).unwrap(), "service");
        assert_eq!(serialize_labels(&set(&["service", "food"]), &ls, &t()).unwrap(), "food; service");
        assert!(matches!(
            serialize_labels(&set(&["pizza"]), &ls, &t()),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn parse_cases() {
        let ls = vec!["food".to_string(), "service".to_string()];
        let (l, d) = parse_labels("food; service", &ls, &t());
        assert_eq!(l, set(&["food", "service"]));
        assert_eq!(d.hallucinated, 0);

        let (l, d) = parse_labels("", &ls, &t());
        assert!(l.is_empty());
        assert_eq!(d, ParseDiagnostics::default());

        let (l, d) = parse_labels("food; pizza", &ls, &t());
        assert_eq!(l, set(&["food"]));
        assert_eq!(d.hallucinated, 1);

        let (l, d) = parse_labels(" food ;food</s>", &ls, &t());
        assert_eq!(l, set(&["food"]));
        assert_eq!(d.duplicates, 1);
    }

    #[test]
    fn truncation_drops_oldest_demos() {
        let mut tpl = t();
        tpl.max_tokens = 16;
        let demos = Demonstrations {
            origin_lang: "en".into(),
            pairs: (0..4).map(|i| (format!("d{i} w w"), set(&["food"]))).collect(),
            indices: vec![0, 1, 2, 3],
        };
        let input = Example::new("q q q", ["food"], "en");
        // each demo: 3 text + "=>" + label + "###" = 6 tokens; query 4
        let r = render_ict_instance(&demos, &input, &tpl).unwrap();
        assert_eq!(r.dropped_demos, 2);
        assert_eq!(r.token_length, 16);
        assert!(r.prompt.starts_with("d2 "));
        assert!(!r.overlong);

        tpl.overlong = OverlongPolicy::Error;
        assert!(matches!(
            render_ict_instance(&demos, &input, &tpl),
            Err(Error::OverlongPrompt { tokens: 28, .. })
        ));
    }

    #[test]
    fn query_alone_too_long_is_flagged() {
        let mut tpl = t();
        tpl.max_tokens = 16;
        let input = Example::new(vec!["w"; 20].join(" "), ["food"], "en");
        let r = render_pft_instance(&input, &tpl).unwrap();
        assert!(r.overlong);
    }

    #[test]
    fn sanitize_removes_separator_cores() {
        let s = t().sanitize("a => b ### c \\ d");
        assert!(!s.contains("=>"));
        assert!(!s.contains("###"));
        assert_ne!(t().sanitize("=\\>"), t().sanitize("=>"));
    }

    #[test]
    fn template_validation() {
        assert!(t().validate().is_ok());
        let mut bad = t();
        bad.io_sep = bad.example_sep.clone();
        assert!(bad.validate().is_err());
        let mut small = t();
        small.max_tokens = 8;
        assert!(small.validate().is_err());
    }
}
