use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use super::spec::SubmitSpec;

/// Placeholders a template body may use.
pub const PLACEHOLDERS: [&str; 7] = [
    "endpoint_job_id",
    "model_name",
    "model_version",
    "capabilities",
    "callback_url",
    "callback_token",
    "bearer_token",
];

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{\{\s*([A-Za-z0-9_]+)\s*\}\}").expect("valid regex"));

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RenderError {
    #[error("unresolved placeholder {0:?}")]
    UnresolvedPlaceholder(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("cannot read templates: {0}")]
    Io(String),
}

/// A batch script template. Leading comment and blank lines (shebang,
/// `#SBATCH` directives) form the header, which is copied unchanged; the
/// rest is the body, where placeholders are substituted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchTemplate {
    pub name: String,
    pub resource_directives: String,
    pub body: String,
}

impl BatchTemplate {
    pub fn parse(name: impl Into<String>, text: &str) -> Self {
        let mut split = 0;
        for line in text.split_inclusive('\n') {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                split += line.len();
            } else {
                break;
            }
        }
        Self {
            name: name.into(),
            resource_directives: text[..split].to_string(),
            body: text[split..].to_string(),
        }
    }

    /// Renders the script for one submission. The output is the header, a
    /// generated block exporting the submission parameters and performing
    /// the registration callback, then the substituted body.
    pub fn render(&self, spec: &SubmitSpec, bearer_token: &str) -> Result<String, RenderError> {
        if let Some(m) = self.resource_directives.find("{{") {
            return Err(RenderError::UnresolvedPlaceholder(snippet(&self.resource_directives[m..])));
        }
        let values = placeholder_values(spec, bearer_token);
        let mut unresolved = None;
        let body = PLACEHOLDER.replace_all(&self.body, |c: &regex::Captures<'_>| {
            let key = &c[1];
            match values.get(key) {
                Some(v) => v.clone(),
                None => {
                    unresolved.get_or_insert_with(|| key.to_string());
                    String::new()
                }
            }
        });
        if let Some(key) = unresolved {
            return Err(RenderError::UnresolvedPlaceholder(key));
        }
        if let Some(m) = body.find("{{") {
            return Err(RenderError::UnresolvedPlaceholder(snippet(&body[m..])));
        }

        let mut out = String::new();
        if !self.resource_directives.starts_with("#!") {
            out.push_str("#!/bin/bash\n");
        }
        out.push_str(&self.resource_directives);
        if !out.ends_with('\n') {
            out.push('\n');
        }
        out.push_str(&registration_block(spec, bearer_token));
        out.push_str(&body);
        Ok(out)
    }
}

fn snippet(s: &str) -> String {
    s.chars().take_while(|c| !c.is_whitespace()).take(40).collect()
}

fn placeholder_values(spec: &SubmitSpec, bearer_token: &str) -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("endpoint_job_id", spec.endpoint_job_id.to_string()),
        ("model_name", spec.model_name.clone()),
        ("model_version", spec.model_version.clone()),
        ("capabilities", capabilities_list(spec)),
        ("callback_url", spec.callback_url.clone()),
        ("callback_token", spec.callback_token.clone()),
        ("bearer_token", bearer_token.to_string()),
    ])
}

fn capabilities_list(spec: &SubmitSpec) -> String {
    spec.capabilities.iter().cloned().collect::<Vec<_>>().join(";")
}

/// Single-quotes `s` for POSIX shells.
pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

const EXPORT_PREFIX: &str = "LLMSCALE_";

fn registration_block(spec: &SubmitSpec, bearer_token: &str) -> String {
    let caps: Vec<&String> = spec.capabilities.iter().collect();
    let exports = [
        ("ENDPOINT_JOB_ID", spec.endpoint_job_id.to_string()),
        ("MODEL_NAME", spec.model_name.clone()),
        ("MODEL_VERSION", spec.model_version.clone()),
        ("CAPABILITIES", capabilities_list(spec)),
        ("CALLBACK_URL", spec.callback_url.clone()),
        ("CALLBACK_TOKEN", spec.callback_token.clone()),
        ("BEARER_TOKEN", bearer_token.to_string()),
        ("MODEL_VERSION_JSON", serde_json::Value::from(spec.model_version.clone()).to_string()),
        ("CAPABILITIES_JSON", serde_json::to_string(&caps).expect("strings serialize")),
    ];
    let mut out = String::from("\n# llmscale: endpoint registration\n");
    for (name, value) in exports {
        out.push_str(&format!("export {EXPORT_PREFIX}{name}={}\n", shell_quote(&value)));
    }
    out.push_str(
        r#"LLMSCALE_REGISTRATION=$(printf '{"endpoint_job_id":"%s","scheduler_job_id":"%s","node_id":"%s","model_version":%s,"capabilities":%s,"bearer_token":"%s"}' \
  "$LLMSCALE_ENDPOINT_JOB_ID" "${SLURM_JOB_ID:-}" "$(hostname)" \
  "$LLMSCALE_MODEL_VERSION_JSON" "$LLMSCALE_CAPABILITIES_JSON" "$LLMSCALE_BEARER_TOKEN")
LLMSCALE_PORT=$(curl --silent --show-error --fail -X POST "$LLMSCALE_CALLBACK_URL" \
  -H "Authorization: Bearer $LLMSCALE_CALLBACK_TOKEN" \
  -H 'Content-Type: application/json' \
  --data "$LLMSCALE_REGISTRATION" | sed -n 's/.*"assigned_port"[^0-9]*\([0-9][0-9]*\).*/\1/p')
if [ -z "$LLMSCALE_PORT" ]; then
  echo "llmscale: endpoint registration failed" >&2
  exit 1
fi
export LLMSCALE_PORT

"#,
    );
    out
}

/// Reads `export NAME='value'` lines back out of a rendered script.
pub fn parse_exports(script: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for line in script.lines() {
        let Some(rest) = line.trim_start().strip_prefix("export ") else {
            continue;
        };
        let Some((name, raw)) = rest.split_once('=') else {
            continue;
        };
        if let Some(value) = unquote(raw) {
            out.insert(name.trim().to_string(), value);
        }
    }
    out
}

fn unquote(raw: &str) -> Option<String> {
    let mut out = String::new();
    let mut chars = raw.trim_end().chars();
    while let Some(c) = chars.next() {
        match c {
            '\'' => loop {
                match chars.next()? {
                    '\'' => break,
                    c => out.push(c),
                }
            },
            '\\' => out.push(chars.next()?),
            '"' | '$' | '`' => return None,
            c if c.is_whitespace() => return None,
            c => out.push(c),
        }
    }
    Some(out)
}

/// The submission parameters carried by a rendered script.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptParameters {
    pub endpoint_job_id: String,
    pub model_name: String,
    pub model_version: String,
    pub capabilities: Vec<String>,
    pub callback_url: String,
    pub callback_token: String,
    pub bearer_token: String,
}

impl ScriptParameters {
    pub fn from_script(script: &str) -> Option<Self> {
        let env = parse_exports(script);
        let get = |k: &str| env.get(&format!("{EXPORT_PREFIX}{k}")).cloned();
        Some(Self {
            endpoint_job_id: get("ENDPOINT_JOB_ID")?,
            model_name: get("MODEL_NAME")?,
            model_version: get("MODEL_VERSION")?,
            capabilities: get("CAPABILITIES")?
                .split(';')
                .filter(|c| !c.is_empty())
                .map(String::from)
                .collect(),
            callback_url: get("CALLBACK_URL")?,
            callback_token: get("CALLBACK_TOKEN")?,
            bearer_token: get("BEARER_TOKEN")?,
        })
    }
}

/// Templates by name.
#[derive(Clone, Debug, Default)]
pub struct TemplateCatalog {
    templates: BTreeMap<String, BatchTemplate>,
}

impl TemplateCatalog {
    pub fn new(templates: impl IntoIterator<Item = BatchTemplate>) -> Self {
        Self {
            templates: templates.into_iter().map(|t| (t.name.clone(), t)).collect(),
        }
    }

    /// Loads every `*.slurm` file in `dir`; the file stem is the template name.
    pub fn load_dir(dir: &Path) -> Result<Self, RenderError> {
        let io = |e: std::io::Error| RenderError::Io(format!("{}: {e}", dir.display()));
        let mut templates = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("slurm") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path).map_err(io)?;
            templates.push(BatchTemplate::parse(stem, &text));
        }
        Ok(Self::new(templates))
    }

    pub fn get(&self, name: &str) -> Option<&BatchTemplate> {
        self.templates.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.templates.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, spec: &SubmitSpec, bearer_token: &str) -> Result<String, RenderError> {
        self.get(&spec.template_name)
            .ok_or_else(|| RenderError::UnknownTemplate(spec.template_name.clone()))?
            .render(spec, bearer_token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EndpointJobId;

    const TEMPLATE: &str = "#!/bin/bash\n#SBATCH --gres=gpu:2\n#SBATCH --time=24:00:00\n\nsrun vllm serve {{model_version}} --port \"$LLMSCALE_PORT\" --api-key {{ bearer_token }} # job {{endpoint_job_id}}\necho {{model_name}} {{capabilities}} {{callback_url}} {{callback_token}}\n";

    fn spec() -> SubmitSpec {
        SubmitSpec {
            endpoint_job_id: EndpointJobId(12),
            model_name: "llama".into(),
            model_version: "meta/llama-3 it's".into(),
            template_name: "gpu".into(),
            capabilities: ["chat".to_string(), "vision".to_string()].into(),
            callback_url: "http://cp:9000/internal/endpoints/register".into(),
            callback_token: "cbtok".into(),
        }
    }

    #[test]
    fn renders_without_placeholders() {
        let t = BatchTemplate::parse("gpu", TEMPLATE);
        let script = t.render(&spec(), "bearer").unwrap();
        assert!(!script.contains("{{"));
        assert!(script.contains("srun vllm serve meta/llama-3 it's --port"));
        assert!(script.contains("--api-key bearer # job 12"));
        assert!(script.contains("echo llama chat;vision http://cp:9000"));
    }

    #[test]
    fn directives_are_verbatim() {
        let t = BatchTemplate::parse("gpu", TEMPLATE);
        assert_eq!(t.resource_directives, "#!/bin/bash\n#SBATCH --gres=gpu:2\n#SBATCH --time=24:00:00\n\n");
        let script = t.render(&spec(), "bearer").unwrap();
        assert!(script.starts_with(&t.resource_directives));
        assert!(script.contains("#SBATCH --gres=gpu:2\n"));
    }

    #[test]
    fn missing_shebang_is_added() {
        let t = BatchTemplate::parse("t", "#SBATCH -N 1\nrun {{model_name}}\n");
        let script = t.render(&spec(), "b").unwrap();
        assert!(script.starts_with("#!/bin/bash\n#SBATCH -N 1\n"));
    }

    #[test]
    fn typo_is_unresolved() {
        let t = BatchTemplate::parse("t", "#!/bin/sh\nrun {{modle}}\n");
        assert_eq!(
            t.render(&spec(), "b"),
            Err(RenderError::UnresolvedPlaceholder("modle".into()))
        );
        let t = BatchTemplate::parse("t", "#!/bin/sh\nrun {{model name}}\n");
        assert!(matches!(t.render(&spec(), "b"), Err(RenderError::UnresolvedPlaceholder(_))));
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = BatchTemplate::parse("gpu", TEMPLATE);
        assert_eq!(t.render(&spec(), "b").unwrap(), t.render(&spec(), "b").unwrap());
    }

    #[test]
    fn script_contains_callback_and_parameters_round_trip() {
        let script = BatchTemplate::parse("gpu", TEMPLATE).render(&spec(), "bearer").unwrap();
        assert!(script.contains("curl --silent --show-error --fail -X POST \"$LLMSCALE_CALLBACK_URL\""));
        let p = ScriptParameters::from_script(&script).unwrap();
        assert_eq!(p.endpoint_job_id, "12");
        assert_eq!(p.model_version, "meta/llama-3 it's");
        assert_eq!(p.capabilities, vec!["chat", "vision"]);
        assert_eq!(p.callback_token, "cbtok");
        assert_eq!(p.bearer_token, "bearer");
        let env = parse_exports(&script);
        assert_eq!(env["LLMSCALE_CAPABILITIES_JSON"], r#"["chat","vision"]"#);
        assert_eq!(env["LLMSCALE_MODEL_VERSION_JSON"], r#""meta/llama-3 it's""#);
    }

    #[test]
    fn shell_quote_round_trips() {
        for s in ["", "plain", "it's", "''", "a b\nc", "$HOME `x`"] {
            assert_eq!(unquote(&shell_quote(s)).as_deref(), Some(s));
        }
    }

    #[test]
    fn catalog_loads_slurm_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("gpu.slurm"), TEMPLATE).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let catalog = TemplateCatalog::load_dir(dir.path()).unwrap();
        assert_eq!(catalog.names().collect::<Vec<_>>(), vec!["gpu"]);
        assert!(catalog.render(&spec(), "b").is_ok());
        let mut other = spec();
        other.template_name = "cpu".into();
        assert_eq!(catalog.render(&other, "b"), Err(RenderError::UnknownTemplate("cpu".into())));
    }
}
