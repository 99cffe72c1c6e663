//! Versioned role prompt templates shipped under `prompts/`.
//!
//! Each file starts with `# template: <name>` and `# version: <n>` header
//! lines; `{{key}}` placeholders are substituted by [`PromptTemplate::render`].

use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    pub body: String,
}

impl PromptTemplate {
    pub fn parse(source: &str) -> Result<Self, String> {
        let mut name = None;
        let mut version = None;
        let mut body_start = 0;
        for line in source.lines() {
            let Some(header) = line.strip_prefix("# ") else { break };
            if let Some(n) = header.strip_prefix("template:") {
                name = Some(n.trim().to_string());
            } else if let Some(v) = header.strip_prefix("version:") {
                version = Some(v.trim().parse::<u32>().map_err(|e| format!("bad version: {e}"))?);
            } else {
                break;
            }
            body_start += line.len() + 1;
        }
        Ok(Self {
            name: name.ok_or("missing `# template:` header")?,
            version: version.ok_or("missing `# version:` header")?,
            body: source[body_start.min(source.len())..].to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let src = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&src)
    }

    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.body.clone();
        for (k, v) in vars {
            out = out.replace(&format!("{{{{{k}}}}}"), v);
        }
        out.trim().to_string()
    }
}

macro_rules! builtin {
    ($fn_name:ident, $file:literal) => {
        pub fn $fn_name() -> PromptTemplate {
            PromptTemplate::parse(include_str!(concat!("../prompts/", $file)))
                .expect(concat!("bundled template ", $file))
        }
    };
}

builtin!(verifier, "verifier.txt");
builtin!(consistency_judge, "consistency_judge.txt");
builtin!(generator_initial, "generator_initial.txt");
builtin!(generator_refine, "generator_refine.txt");
builtin!(rewrite, "rewrite.txt");
builtin!(solver, "solver.txt");
builtin!(point_matcher, "point_matcher.txt");
