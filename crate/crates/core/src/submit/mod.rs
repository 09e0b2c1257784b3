//! The scheduler adapter: a comma-delimited submission string is decoded,
//! rendered into a batch script from a per-model template, and handed to a
//! scheduler backend.

mod backend;
mod service;
mod spec;
mod template;

pub use backend::{parse_submit_output, CommandBackend, SchedulerBackend, SchedulerError};
pub use service::{JobSubmitter, SubmitService};
pub use spec::{MalformedSubmitString, SubmitSpec};
pub use template::{
    parse_exports, shell_quote, BatchTemplate, RenderError, ScriptParameters, TemplateCatalog,
    PLACEHOLDERS,
};
