//! Prompt construction: the three-stage instruction, the stage-1 generation
//! prompt and the stage-2 revision prompt.
//!
//! Wording lives in plain-text templates with `{name}` placeholders. The
//! built-in set is compiled in; [`Templates::load_dir`] overrides any of
//! them from a directory at startup.

use std::fs;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::model::{AspectTerm, ChainOfThought, Demonstration, LabelScheme, Polarity, Sentence};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: placeholder {{{name}}} is not bound")]
    UnboundPlaceholder { template: String, name: String },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A named template body with `{placeholder}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    body: String,
}

impl PromptTemplate {
    /// Parses `body` and rejects placeholders outside `allowed`.
    pub fn new(
        name: impl Into<String>,
        body: impl Into<String>,
        allowed: &[&str],
    ) -> Result<Self, PromptError> {
        let template = Self {
            name: name.into(),
            body: body.into(),
        };
        for (_, placeholder) in template.placeholders() {
            if !allowed.contains(&placeholder) {
                return Err(PromptError::UnknownPlaceholder {
                    template: template.name.clone(),
                    name: placeholder.to_string(),
                });
            }
        }
        Ok(template)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// `{identifier}` occurrences as (byte range, identifier). Braces around
    /// anything else are literal text.
    fn placeholders(&self) -> Vec<(Range<usize>, &str)> {
        let bytes = self.body.as_bytes();
        let mut found = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'{' {
                let rest = &self.body[i + 1..];
                if let Some(close) = rest.find('}') {
                    let ident = &rest[..close];
                    if !ident.is_empty()
                        && ident.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
                    {
                        found.push((i..i + close + 2, ident));
                        i += close + 2;
                        continue;
                    }
                }
            }
            i += 1;
        }
        found
    }

    /// Single-pass substitution; bound values are never re-scanned.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        let mut cursor = 0;
        for (range, name) in self.placeholders() {
            let value = bindings
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::UnboundPlaceholder {
                    template: self.name.clone(),
                    name: name.to_string(),
                })?;
            out.push_str(&self.body[cursor..range.start]);
            out.push_str(value);
            cursor = range.end;
        }
        out.push_str(&self.body[cursor..]);
        Ok(out)
    }
}

const INSTRUCTION_VARS: &[&str] = &["sentence", "aspect", "label_slash", "label_caps"];
const STAGE1_DEMO_VARS: &[&str] = &["sentence", "aspect", "cot", "answer"];
const REVISION_DEMO_VARS: &[&str] = &["sentence", "aspect", "wrong_cot", "correct_cot", "answer"];
const REVISION_REQUEST_VARS: &[&str] = &["cot"];
const ICL_DEMO_VARS: &[&str] = &["sentence", "aspect", "answer"];
const ICL_QUERY_VARS: &[&str] = &["sentence", "aspect", "label_caps"];

/// The full template set. File names under a template directory are
/// `<key>.txt` for each key in [`Templates::FILE_KEYS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub instruction: PromptTemplate,
    pub stage1_demo: PromptTemplate,
    pub revision_demo: PromptTemplate,
    pub revision_request: PromptTemplate,
    pub icl_demo: PromptTemplate,
    pub icl_query: PromptTemplate,
}

impl Templates {
    pub const FILE_KEYS: [&'static str; 6] = [
        "instruction",
        "stage1_demo",
        "revision_demo",
        "revision_request",
        "icl_demo",
        "icl_query",
    ];

    fn vars_for(key: &str) -> &'static [&'static str] {
        match key {
            "instruction" => INSTRUCTION_VARS,
            "stage1_demo" => STAGE1_DEMO_VARS,
            "revision_demo" => REVISION_DEMO_VARS,
            "revision_request" => REVISION_REQUEST_VARS,
            "icl_demo" => ICL_DEMO_VARS,
            "icl_query" => ICL_QUERY_VARS,
            _ => unreachable!("unknown template key {key}"),
        }
    }

    fn builtin_body(key: &str) -> &'static str {
        match key {
            "instruction" => include_str!("../templates/instruction.txt"),
            "stage1_demo" => include_str!("../templates/stage1_demo.txt"),
            "revision_demo" => include_str!("../templates/revision_demo.txt"),
            "revision_request" => include_str!("../templates/revision_request.txt"),
            "icl_demo" => include_str!("../templates/icl_demo.txt"),
            "icl_query" => include_str!("../templates/icl_query.txt"),
            _ => unreachable!("unknown template key {key}"),
        }
    }

    fn from_bodies(mut body_of: impl FnMut(&str) -> Result<String, PromptError>) -> Result<Self, PromptError> {
        let mut build = |key: &str| PromptTemplate::new(key, body_of(key)?, Self::vars_for(key));
        Ok(Self {
            instruction: build("instruction")?,
            stage1_demo: build("stage1_demo")?,
            revision_demo: build("revision_demo")?,
            revision_request: build("revision_request")?,
            icl_demo: build("icl_demo")?,
            icl_query: build("icl_query")?,
        })
    }

    pub fn builtin() -> Self {
        Self::from_bodies(|key| Ok(Self::builtin_body(key).to_string()))
            .expect("built-in templates are valid")
    }

    /// Loads `<key>.txt` files from `dir`; keys without a file keep the
    /// built-in wording.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        Self::from_bodies(|key| {
            let path = dir.join(format!("{key}.txt"));
            match fs::read_to_string(&path) {
                Ok(body) => Ok(body),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    Ok(Self::builtin_body(key).to_string())
                }
                Err(source) => Err(PromptError::Io {
                    path: path.display().to_string(),
                    source,
                }),
            }
        })
    }
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Named, contiguous region of a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub span: Range<usize>,
}

/// A rendered prompt plus the sections it was assembled from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    rendered: String,
    sections: Vec<Section>,
}

pub const SECTION_SEPARATOR: &str = "\n\n";

impl PromptText {
    fn from_sections(parts: Vec<(&str, String)>) -> Self {
        let mut rendered = String::new();
        let mut sections = Vec::with_capacity(parts.len());
        let last = parts.len().saturating_sub(1);
        for (i, (name, mut text)) in parts.into_iter().enumerate() {
            if i < last {
                text.push_str(SECTION_SEPARATOR);
            }
            let start = rendered.len();
            rendered.push_str(&text);
            sections.push(Section {
                name: name.to_string(),
                span: start..rendered.len(),
            });
        }
        Self { rendered, sections }
    }

    /// Wraps raw text as a single-section prompt.
    pub fn raw(text: impl Into<String>) -> Self {
        Self::from_sections(vec![("raw", text.into())])
    }

    pub fn rendered(&self) -> &str {
        &self.rendered
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn section_text(&self, section: &Section) -> &str {
        &self.rendered[section.span.clone()]
    }

    pub fn demonstration_count(&self) -> usize {
        self.sections.iter().filter(|s| s.name == DEMO_SECTION).count()
    }

    /// Text of every demonstration block, in rendered order.
    pub fn demonstration_blocks(&self) -> Vec<&str> {
        self.sections
            .iter()
            .filter(|s| s.name == DEMO_SECTION)
            .map(|s| self.section_text(s).trim_end_matches(SECTION_SEPARATOR))
            .collect()
    }
}

pub const DEMO_SECTION: &str = "demonstration";
pub const INSTRUCTION_SECTION: &str = "instruction";
pub const REVISION_SECTION: &str = "revision";

/// Order in which revision demonstrations are rendered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DemoOrder {
    /// Most similar demonstration adjacent to the test block.
    #[default]
    MostSimilarLast,
    /// Ranked order as given (the NWGM-Reverse ablation).
    MostSimilarFirst,
}

fn label_slash(scheme: LabelScheme) -> String {
    scheme
        .labels()
        .iter()
        .map(|p| p.as_str())
        .collect::<Vec<_>>()
        .join(" / ")
}

fn label_caps(scheme: LabelScheme) -> String {
    let order: &[Polarity] = match scheme {
        LabelScheme::ThreeClass => &[Polarity::Positive, Polarity::Negative, Polarity::Neutral],
        LabelScheme::FourClass => &[
            Polarity::Positive,
            Polarity::Negative,
            Polarity::Conflict,
            Polarity::Neutral,
        ],
    };
    order
        .iter()
        .map(|p| p.as_str().to_uppercase())
        .collect::<Vec<_>>()
        .join(", ")
}

fn upper(p: Polarity) -> String {
    p.as_str().to_uppercase()
}

/// Renders every prompt the pipeline sends.
#[derive(Debug, Clone, Default)]
pub struct Prompter {
    templates: Templates,
    scheme: LabelScheme,
}

impl Prompter {
    pub fn new(templates: Templates, scheme: LabelScheme) -> Self {
        Self { templates, scheme }
    }

    pub fn scheme(&self) -> LabelScheme {
        self.scheme
    }

    pub fn templates(&self) -> &Templates {
        &self.templates
    }

    fn instruction_text(&self, sentence: &Sentence, aspect: &AspectTerm) -> String {
        self.templates
            .instruction
            .render(&[
                ("sentence", sentence.text()),
                ("aspect", aspect.surface()),
                ("label_slash", &label_slash(self.scheme)),
                ("label_caps", &label_caps(self.scheme)),
            ])
            .expect("instruction placeholders are validated at load")
    }

    pub fn build_three_stage_instruction(&self, sentence: &Sentence, aspect: &AspectTerm) -> PromptText {
        PromptText::from_sections(vec![(INSTRUCTION_SECTION, self.instruction_text(sentence, aspect))])
    }

    /// `[d_1, ..., d_R, s_test]`: each demonstration shows its correct CoT.
    pub fn assemble_initial_prompt(
        &self,
        demos: &[Demonstration],
        sentence: &Sentence,
        aspect: &AspectTerm,
    ) -> PromptText {
        let mut parts: Vec<(&str, String)> = demos
            .iter()
            .map(|d| {
                let block = self
                    .templates
                    .stage1_demo
                    .render(&[
                        ("sentence", d.sentence().text()),
                        ("aspect", d.aspect().surface()),
                        ("cot", &d.correct_cot().text),
                        ("answer", &upper(d.gold())),
                    ])
                    .expect("stage-1 demo placeholders are validated at load");
                (DEMO_SECTION, block)
            })
            .collect();
        parts.push((INSTRUCTION_SECTION, self.instruction_text(sentence, aspect)));
        PromptText::from_sections(parts)
    }

    /// `[d_L, ..., d_1, s_test]` followed by the reasoning to improve.
    /// `ranked_demos` arrives most-similar-first.
    pub fn assemble_revision_prompt(
        &self,
        ranked_demos: &[Demonstration],
        sentence: &Sentence,
        aspect: &AspectTerm,
        centroid_cot: &ChainOfThought,
        order: DemoOrder,
    ) -> PromptText {
        let render = |d: &Demonstration| {
            let block = self
                .templates
                .revision_demo
                .render(&[
                    ("sentence", d.sentence().text()),
                    ("aspect", d.aspect().surface()),
                    ("wrong_cot", &d.wrong_cot().text),
                    ("correct_cot", &d.correct_cot().text),
                    ("answer", &upper(d.gold())),
                ])
                .expect("revision demo placeholders are validated at load");
            (DEMO_SECTION, block)
        };
        let mut parts: Vec<(&str, String)> = match order {
            DemoOrder::MostSimilarLast => ranked_demos.iter().rev().map(render).collect(),
            DemoOrder::MostSimilarFirst => ranked_demos.iter().map(render).collect(),
        };
        parts.push((INSTRUCTION_SECTION, self.instruction_text(sentence, aspect)));
        let request = self
            .templates
            .revision_request
            .render(&[("cot", &centroid_cot.text)])
            .expect("revision request placeholders are validated at load");
        parts.push((REVISION_SECTION, request));
        PromptText::from_sections(parts)
    }

    /// Answer-only few-shot prompt used by the ICL baseline.
    pub fn assemble_icl_prompt(
        &self,
        demos: &[Demonstration],
        sentence: &Sentence,
        aspect: &AspectTerm,
    ) -> PromptText {
        let mut parts: Vec<(&str, String)> = demos
            .iter()
            .map(|d| {
                let block = self
                    .templates
                    .icl_demo
                    .render(&[
                        ("sentence", d.sentence().text()),
                        ("aspect", d.aspect().surface()),
                        ("answer", &upper(d.gold())),
                    ])
                    .expect("icl demo placeholders are validated at load");
                (DEMO_SECTION, block)
            })
            .collect();
        let query = self
            .templates
            .icl_query
            .render(&[
                ("sentence", sentence.text()),
                ("aspect", aspect.surface()),
                ("label_caps", &label_caps(self.scheme)),
            ])
            .expect("icl query placeholders are validated at load");
        parts.push((INSTRUCTION_SECTION, query));
        PromptText::from_sections(parts)
    }
}
