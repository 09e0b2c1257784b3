use std::collections::BTreeSet;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::EndpointJobId;

const FIELD: &AsciiSet = &CONTROLS.add(b'%').add(b',').add(b';');
const ARITY: usize = 7;

/// Everything a batch job needs to start an inference server and announce it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitSpec {
    pub endpoint_job_id: EndpointJobId,
    pub model_name: String,
    pub model_version: String,
    pub template_name: String,
    pub capabilities: BTreeSet<String>,
    pub callback_url: String,
    pub callback_token: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed submit string: {0}")]
pub struct MalformedSubmitString(pub String);

fn malformed(msg: impl Into<String>) -> MalformedSubmitString {
    MalformedSubmitString(msg.into())
}

fn enc(s: &str) -> String {
    utf8_percent_encode(s, FIELD).to_string()
}

fn dec(s: &str, field: &str) -> Result<String, MalformedSubmitString> {
    let out = percent_decode_str(s)
        .decode_utf8()
        .map_err(|_| malformed(format!("{field} is not valid UTF-8")))?
        .into_owned();
    if out.is_empty() {
        return Err(malformed(format!("{field} is empty")));
    }
    Ok(out)
}

impl SubmitSpec {
    pub fn validate(&self) -> Result<(), MalformedSubmitString> {
        let text = [
            ("model_name", &self.model_name),
            ("model_version", &self.model_version),
            ("template_name", &self.template_name),
            ("callback_url", &self.callback_url),
            ("callback_token", &self.callback_token),
        ];
        for (name, value) in text {
            if value.is_empty() {
                return Err(malformed(format!("{name} is empty")));
            }
        }
        if self.capabilities.is_empty() || self.capabilities.iter().any(String::is_empty) {
            return Err(malformed("capabilities must be a non-empty set of non-empty names"));
        }
        Ok(())
    }

    /// `endpoint_job_id,model_name,model_version,template_name,capabilities,callback_url,callback_token`
    /// with capabilities sorted and `;`-joined, and `%`, `,`, `;` and control
    /// characters percent-encoded inside each field.
    pub fn encode(&self) -> String {
        let caps: Vec<String> = self.capabilities.iter().map(|c| enc(c)).collect();
        [
            self.endpoint_job_id.to_string(),
            enc(&self.model_name),
            enc(&self.model_version),
            enc(&self.template_name),
            caps.join(";"),
            enc(&self.callback_url),
            enc(&self.callback_token),
        ]
        .join(",")
    }

    /// Inverse of [`SubmitSpec::encode`]. `template_exists` rejects names that
    /// do not resolve to a template.
    pub fn decode(s: &str, template_exists: &dyn Fn(&str) -> bool) -> Result<Self, MalformedSubmitString> {
        let fields: Vec<&str> = s.trim_end_matches(['\r', '\n']).split(',').collect();
        if fields.len() != ARITY {
            return Err(malformed(format!("expected {ARITY} fields, got {}", fields.len())));
        }
        let endpoint_job_id = fields[0]
            .parse()
            .map_err(|_| malformed(format!("endpoint_job_id {:?} is not an id", fields[0])))?;
        let capabilities = fields[4]
            .split(';')
            .map(|c| dec(c, "capability"))
            .collect::<Result<BTreeSet<_>, _>>()?;
        let spec = SubmitSpec {
            endpoint_job_id,
            model_name: dec(fields[1], "model_name")?,
            model_version: dec(fields[2], "model_version")?,
            template_name: dec(fields[3], "template_name")?,
            capabilities,
            callback_url: dec(fields[5], "callback_url")?,
            callback_token: dec(fields[6], "callback_token")?,
        };
        if !template_exists(&spec.template_name) {
            return Err(malformed(format!("unknown template {:?}", spec.template_name)));
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn any_template(_: &str) -> bool {
        true
    }

    fn spec(caps: &[&str]) -> SubmitSpec {
        SubmitSpec {
            endpoint_job_id: EndpointJobId(1),
            model_name: "m".into(),
            model_version: "v1".into(),
            template_name: "t".into(),
            capabilities: caps.iter().map(|c| c.to_string()).collect(),
            callback_url: "u".into(),
            callback_token: "k".into(),
        }
    }

    #[test]
    fn encodes_in_fixed_order() {
        assert_eq!(spec(&["chat"]).encode(), "1,m,v1,t,chat,u,k");
    }

    #[test]
    fn capabilities_are_sorted() {
        assert_eq!(spec(&["vision", "chat"]).encode(), "1,m,v1,t,chat;vision,u,k");
    }

    #[test]
    fn delimiters_are_escaped() {
        let mut s = spec(&["chat"]);
        s.model_name = "a,b;c%d".into();
        let wire = s.encode();
        assert!(wire.contains("a%2Cb%3Bc%25d"));
        assert_eq!(SubmitSpec::decode(&wire, &any_template).unwrap(), s);
    }

    #[test]
    fn wrong_arity_is_rejected() {
        assert!(SubmitSpec::decode("1,m,v1,t,chat,u", &any_template).is_err());
        assert!(SubmitSpec::decode("1,m,v1,t,chat,u,k,x", &any_template).is_err());
    }

    #[test]
    fn empty_fields_and_unknown_templates_are_rejected() {
        assert!(SubmitSpec::decode("1,,v1,t,chat,u,k", &any_template).is_err());
        assert!(SubmitSpec::decode("1,m,v1,t,chat;,u,k", &any_template).is_err());
        assert!(SubmitSpec::decode("x,m,v1,t,chat,u,k", &any_template).is_err());
        assert!(SubmitSpec::decode("1,m,v1,t,chat,u,k", &|n| n == "other").is_err());
    }

    #[test]
    fn trailing_newline_is_ignored() {
        assert_eq!(SubmitSpec::decode("1,m,v1,t,chat,u,k\n", &any_template).unwrap(), spec(&["chat"]));
    }

    fn text() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[a-zA-Z0-9,;%:/._\\- \n\u{e9}\u{4e2d}]{1,16}").unwrap()
    }

    proptest! {
        #[test]
        fn codec_is_bijective(
            id in any::<u64>(),
            model in text(),
            version in text(),
            template in text(),
            caps in proptest::collection::btree_set(text(), 1..4),
            url in text(),
            token in text(),
        ) {
            let s = SubmitSpec {
                endpoint_job_id: EndpointJobId(id),
                model_name: model,
                model_version: version,
                template_name: template,
                capabilities: caps,
                callback_url: url,
                callback_token: token,
            };
            prop_assert!(s.validate().is_ok());
            let wire = s.encode();
            prop_assert_eq!(wire.split(',').count(), ARITY);
            prop_assert!(!wire.contains('\n'));
            prop_assert_eq!(SubmitSpec::decode(&wire, &any_template).unwrap(), s);
        }
    }
}
