//! Backend selection shared by the commands and the service.

use std::time::Duration;

use irda_core::llm::{HttpBackend, HttpConfig, LlmBackend, ScriptedBackend, UreqTransport};
use irda_core::stimulus::EnvKind;

use crate::manifest::BackendSpec;

/// One language-model backend per environment, shared by every session.
pub enum Backends {
    Scripted {
        applefarm: ScriptedBackend,
        moralmachine: ScriptedBackend,
    },
    Http(HttpBackend<UreqTransport>),
}

impl Backends {
    pub fn scripted() -> Self {
        Backends::Scripted {
            applefarm: ScriptedBackend::new(EnvKind::AppleFarm),
            moralmachine: ScriptedBackend::new(EnvKind::MoralMachine),
        }
    }

    pub fn from_spec(spec: &BackendSpec) -> irda_core::Result<Self> {
        match spec {
            BackendSpec::Scripted => Ok(Self::scripted()),
            BackendSpec::Http {
                url,
                model,
                top_logprobs,
                max_attempts,
                min_interval_ms,
            } => {
                let mut config = match (url, model) {
                    (Some(url), Some(model)) => {
                        let mut c = HttpConfig::new(url, model);
                        c.api_key = std::env::var("IRDA_LLM_KEY").ok().filter(|k| !k.is_empty());
                        c
                    }
                    _ => {
                        let mut c = HttpConfig::from_env()?;
                        if let Some(url) = url {
                            c.url = url.clone();
                        }
                        if let Some(model) = model {
                            c.model = model.clone();
                        }
                        c
                    }
                };
                if let Some(t) = top_logprobs {
                    config.top_logprobs = *t;
                }
                if let Some(m) = max_attempts {
                    config.max_attempts = *m;
                }
                config.min_interval = min_interval_ms.map(Duration::from_millis);
                Ok(Backends::Http(HttpBackend::from_config(config)))
            }
        }
    }

    pub fn for_env(&self, env: EnvKind) -> &dyn LlmBackend {
        match self {
            Backends::Scripted { applefarm, .. } if env == EnvKind::AppleFarm => applefarm,
            Backends::Scripted { moralmachine, .. } => moralmachine,
            Backends::Http(b) => b,
        }
    }
}
