//! Mask-bearing templates that concatenate an example's fields with a single
//! mask slot.
//!
//! Custom templates use a small pattern language: `{N}` is field `N`
//! (zero-based), `[MASK]` is the mask slot, `{{` is a literal `{`, and
//! everything else is copied verbatim.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TaskKind};
use crate::error::{Error, Result};

/// Placeholder emitted at the mask slot.
pub const MASK: &str = "[MASK]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Field(usize),
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TemplateRepr", into = "TemplateRepr")]
pub struct Template {
    name: String,
    segments: Vec<Segment>,
}

#[derive(Serialize, Deserialize)]
struct TemplateRepr {
    name: String,
    pattern: String,
}

impl TryFrom<TemplateRepr> for Template {
    type Error = Error;

    fn try_from(r: TemplateRepr) -> Result<Self> {
        Template::parse(&r.name, &r.pattern)
    }
}

impl From<Template> for TemplateRepr {
    fn from(t: Template) -> Self {
        TemplateRepr {
            pattern: t.to_pattern(),
            name: t.name,
        }
    }
}

/// Template text with exactly one mask placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RenderedInput {
    pub text: String,
    pub mask_byte_offset: usize,
}

impl RenderedInput {
    /// Wraps raw text that must contain exactly one mask placeholder.
    pub fn from_text(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        match text.match_indices(MASK).map(|(i, _)| i).collect::<Vec<_>>()[..] {
            [offset] => Ok(RenderedInput {
                text,
                mask_byte_offset: offset,
            }),
            _ => Err(Error::Template(format!(
                "input must contain exactly one {MASK}: {text:?}"
            ))),
        }
    }
}

impl Template {
    pub fn new(name: &str, segments: Vec<Segment>) -> Result<Self> {
        let masks = segments.iter().filter(|s| matches!(s, Segment::Mask)).count();
        if masks != 1 {
            return Err(Error::Template(format!(
                "template {name:?} must contain exactly one mask, found {masks}"
            )));
        }
        if segments
            .iter()
            .any(|s| matches!(s, Segment::Literal(l) if l.contains(MASK)))
        {
            return Err(Error::Template(
                "literal segments may not contain the mask token".into(),
            ));
        }
        Ok(Template {
            name: name.to_string(),
            segments,
        })
    }

    /// Parses the pattern language, e.g. `"{0}? [MASK], {1}"`.
    pub fn parse(name: &str, pattern: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut lit = String::new();
        let mut rest = pattern;
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix(MASK) {
                flush(&mut lit, &mut segments);
                segments.push(Segment::Mask);
                rest = r;
            } else if let Some(r) = rest.strip_prefix("{{") {
                lit.push('{');
                rest = r;
            } else if let Some(r) = rest.strip_prefix('{') {
                let close = r
                    .find('}')
                    .ok_or_else(|| Error::Template(format!("unclosed '{{' in {pattern:?}")))?;
                let idx: usize = r[..close]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Template(format!("bad field index {:?} in {pattern:?}", &r[..close])))?;
                flush(&mut lit, &mut segments);
                segments.push(Segment::Field(idx));
                rest = &r[close + 1..];
            } else {
                let c = rest.chars().next().unwrap();
                lit.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
        flush(&mut lit, &mut segments);
        Template::new(name, segments)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Field count an example must have: one past the highest referenced index.
    pub fn arity(&self) -> usize {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Field(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn to_pattern(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Literal(l) => out.push_str(&l.replace('{', "{{")),
                Segment::Field(i) => out.push_str(&format!("{{{i}}}")),
                Segment::Mask => out.push_str(MASK),
            }
        }
        out
    }

    pub fn render(&self, example: &Example) -> Result<RenderedInput> {
        if example.fields.len() != self.arity() {
            return Err(Error::ArityMismatch {
                expected: self.arity(),
                actual: example.fields.len(),
            });
        }
        let mut text = String::new();
        let mut offset = 0;
        for s in &self.segments {
            match s {
                Segment::Literal(l) => text.push_str(l),
                Segment::Field(i) => {
                    let f = &example.fields[*i];
                    if f.contains(MASK) {
                        return Err(Error::InvalidExample(format!(
                            "field {i} contains the mask token {MASK}"
                        )));
                    }
                    text.push_str(f);
                }
                Segment::Mask => {
                    offset = text.len();
                    text.push_str(MASK);
                }
            }
        }
        Ok(RenderedInput {
            text,
            mask_byte_offset: offset,
        })
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_pattern())
    }
}

fn flush(lit: &mut String, segments: &mut Vec<Segment>) {
    if !lit.is_empty() {
        segments.push(Segment::Literal(std::mem::take(lit)));
    }
}

/// Built-in concatenation template for a task kind.
pub fn builtin_template(kind: TaskKind) -> Template {
    let pattern = match kind {
        TaskKind::SingleSentence => "{0} [MASK]",
        TaskKind::SentencePair | TaskKind::BoolqStyle => "{0}? [MASK], {1}",
        TaskKind::CopaStyle => "{0} {1}? {2}? [MASK], {3}",
        TaskKind::MultircStyle => "{1} [MASK], {2} {0}",
        TaskKind::WicStyle => "{0} {1} '{2}' [MASK]",
    };
    Template::parse(kind.as_str(), pattern).expect("built-in patterns are valid")
}

/// Renders every example, stopping at the first failure.
pub fn render_all<'a, I>(template: &Template, examples: I) -> Result<Vec<RenderedInput>>
where
    I: IntoIterator<Item = &'a Example>,
{
    examples.into_iter().map(|e| template.render(e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(fields: &[&str]) -> Example {
        Example {
            fields: fields.iter().map(|s| s.to_string()).collect(),
            label: None,
        }
    }

    #[test]
    fn builtin_patterns() {
        let pair = builtin_template(TaskKind::SentencePair);
        let r = pair.render(&ex(&["A man sleeps.", "A person rests."])).unwrap();
        assert_eq!(r.text, "A man sleeps.? [MASK], A person rests.");
        assert_eq!(&r.text[r.mask_byte_offset..r.mask_byte_offset + MASK.len()], MASK);

        let single = builtin_template(TaskKind::SingleSentence);
        assert_eq!(
            single.render(&ex(&["Great movie."])).unwrap().text,
            "Great movie. [MASK]"
        );

        let boolq = builtin_template(TaskKind::BoolqStyle);
        assert_eq!(boolq.render(&ex(&["p", "q"])).unwrap().text, "p? [MASK], q");
        let copa = builtin_template(TaskKind::CopaStyle);
        assert_eq!(
            copa.render(&ex(&["a", "b", "c", "d"])).unwrap().text,
            "a b? c? [MASK], d"
        );
        let multirc = builtin_template(TaskKind::MultircStyle);
        assert_eq!(
            multirc.render(&ex(&["x1", "x2", "x3"])).unwrap().text,
            "x2 [MASK], x3 x1"
        );
        let wic = builtin_template(TaskKind::WicStyle);
        assert_eq!(wic.render(&ex(&["s1", "s2", "w"])).unwrap().text, "s1 s2 'w' [MASK]");
    }

    #[test]
    fn builtins_carry_no_words() {
        for kind in TaskKind::ALL {
            let t = builtin_template(kind);
            assert_eq!(t.arity(), kind.arity());
            for s in t.segments() {
                if let Segment::Literal(l) = s {
                    assert!(
                        l.chars().all(|c| c.is_whitespace() || c.is_ascii_punctuation()),
                        "{kind}: literal {l:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn identity_template() {
        let t = Template::parse("id", "[MASK]").unwrap();
        let r = t.render(&ex(&[])).unwrap();
        assert_eq!(r.text, "[MASK]");
        assert_eq!(r.mask_byte_offset, 0);
    }

    #[test]
    fn custom_literals_survive() {
        let t = Template::parse("qa", "Q: {0} A: [MASK]").unwrap();
        let r = t.render(&ex(&["why {not}?"])).unwrap();
        assert_eq!(r.text, "Q: why {not}? A: [MASK]");
        assert_eq!(r, t.render(&ex(&["why {not}?"])).unwrap());
        assert_eq!(
            Template::parse("b", "{{x}} {0} [MASK]")
                .unwrap()
                .render(&ex(&["y"]))
                .unwrap()
                .text,
            "{x}} y [MASK]"
        );
    }

    #[test]
    fn pattern_errors() {
        assert!(Template::parse("none", "{0}").is_err());
        assert!(Template::parse("two", "[MASK] [MASK]").is_err());
        assert!(Template::parse("open", "{0 [MASK]").is_err());
        assert!(Template::parse("nan", "{x} [MASK]").is_err());
        let t = builtin_template(TaskKind::SentencePair);
        assert!(matches!(
            t.render(&ex(&["only one"])),
            Err(Error::ArityMismatch { expected: 2, actual: 1 })
        ));
        assert!(t.render(&ex(&["a [MASK]", "b"])).is_err());
    }

    #[test]
    fn serde_uses_pattern() {
        let t = builtin_template(TaskKind::CopaStyle);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"name":"copa-style","pattern":"{0} {1}? {2}? [MASK], {3}"}"#);
        assert_eq!(serde_json::from_str::<Template>(&json).unwrap(), t);
    }

    proptest! {
        #[test]
        fn render_has_exactly_one_mask(
            fields in prop::collection::vec("[a-zA-Z0-9 ,.?'{}]{1,12}", 1..5),
            lits in prop::collection::vec("[a-z ,.?:]{0,4}", 6),
            mask_pos in 0usize..5,
        ) {
            let n = fields.len();
            let mut segs = Vec::new();
            for (i, lit) in lits.iter().take(n).enumerate() {
                if i == mask_pos.min(n) { segs.push(Segment::Mask); }
                segs.push(Segment::Literal(lit.clone()));
                segs.push(Segment::Field(i));
            }
            if mask_pos >= n { segs.push(Segment::Mask); }
            segs.retain(|s| !matches!(s, Segment::Literal(l) if l.is_empty()));
            let t = Template::new("p", segs).unwrap();
            let r = t.render(&ex(&fields.iter().map(String::as_str).collect::<Vec<_>>())).unwrap();
            prop_assert_eq!(r.text.matches(MASK).count(), 1);
            prop_assert!(r.text[r.mask_byte_offset..].starts_with(MASK));
            let reparsed = Template::parse("p", &t.to_pattern()).unwrap();
            prop_assert_eq!(reparsed.render(&ex(&fields.iter().map(String::as_str).collect::<Vec<_>>())).unwrap(), r);
        }
    }
}
