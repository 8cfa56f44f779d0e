//! Name-keyed factories for the pluggable pieces: policies, embedders,
//! environments and tie policies. Callers pick a variant by name at runtime;
//! extra variants can be registered on a registry before use.

use std::collections::BTreeMap;
use std::time::Duration;

use thiserror::Error;

use crate::embed::{
    Embedder, LocalHashEmbedder, RemoteEmbedder, RemoteEmbedderConfig, DEFAULT_LOCAL_DIM,
};
use crate::env::{connect_external, Environment, LaunchSpec, MiniWorld};
use crate::index::{Lexicographic, SeededShuffle, TieBreak};
use crate::policy::{
    MemoryFollower, NaivePlacer, Policy, PolicyConfig, RemoteChatConfig, RemoteChatPolicy,
};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown {what} `{name}` (known: {known})")]
    Unknown {
        what: &'static str,
        name: String,
        known: String,
    },
    #[error("building {what} `{name}`: {message}")]
    Build {
        what: &'static str,
        name: String,
        message: String,
    },
}

pub type Factory<T, C> = Box<dyn Fn(&C) -> Result<Box<T>, String> + Send + Sync>;

pub struct Registry<T: ?Sized, C> {
    what: &'static str,
    factories: BTreeMap<String, Factory<T, C>>,
}

impl<T: ?Sized, C> Registry<T, C> {
    pub fn new(what: &'static str) -> Self {
        Self {
            what,
            factories: BTreeMap::new(),
        }
    }

    /// Adds or replaces a variant.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        factory: impl Fn(&C) -> Result<Box<T>, String> + Send + Sync + 'static,
    ) -> &mut Self {
        self.factories.insert(name.into(), Box::new(factory));
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, name: &str, config: &C) -> Result<Box<T>, RegistryError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| RegistryError::Unknown {
                what: self.what,
                name: name.to_string(),
                known: self.names().collect::<Vec<_>>().join(", "),
            })?;
        factory(config).map_err(|message| RegistryError::Build {
            what: self.what,
            name: name.to_string(),
            message,
        })
    }
}

impl<T: ?Sized, C> std::fmt::Debug for Registry<T, C> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("what", &self.what)
            .field("names", &self.factories.keys().collect::<Vec<_>>())
            .finish()
    }
}

pub fn policies() -> Registry<dyn Policy, PolicyConfig> {
    let mut r = Registry::new("policy");
    r.register("naive_placer", |c: &PolicyConfig| {
        Ok(Box::new(NaivePlacer::new(c.max_action_chars)) as Box<dyn Policy>)
    });
    r.register("memory_follower", |c: &PolicyConfig| {
        Ok(Box::new(MemoryFollower::new(c.max_action_chars)) as Box<dyn Policy>)
    });
    r.register("remote_chat", |c: &PolicyConfig| {
        let mut cfg = match (&c.endpoint, &c.model) {
            (Some(url), Some(model)) => RemoteChatConfig::new(url, model),
            _ => {
                let mut from_env = RemoteChatConfig::from_env().map_err(|e| e.to_string())?;
                if let Some(url) = &c.endpoint {
                    from_env.base_url = url.clone();
                }
                if let Some(model) = &c.model {
                    from_env.model = model.clone();
                }
                from_env
            }
        };
        if c.token.is_some() {
            cfg.token = c.token.clone();
        } else if cfg.token.is_none() {
            cfg.token = std::env::var(crate::policy::ENV_LLM_TOKEN)
                .ok()
                .filter(|t| !t.is_empty());
        }
        cfg.max_action_chars = c.max_action_chars;
        Ok(Box::new(RemoteChatPolicy::new(cfg).map_err(|e| e.to_string())?) as Box<dyn Policy>)
    });
    r
}

/// Embedders are configured by the argument after the colon of an embedder
/// id such as `local_hash:256` or `remote:<model>`.
pub fn embedders() -> Registry<dyn Embedder, String> {
    let mut r = Registry::new("embedder");
    r.register("local_hash", |arg: &String| {
        let dim = if arg.is_empty() {
            DEFAULT_LOCAL_DIM
        } else {
            arg.parse().map_err(|_| format!("bad dimension `{arg}`"))?
        };
        Ok(Box::new(LocalHashEmbedder::new(dim).map_err(|e| e.to_string())?) as Box<dyn Embedder>)
    });
    r.register("remote", |arg: &String| {
        let mut cfg = RemoteEmbedderConfig::from_env().map_err(|e| e.to_string())?;
        if !arg.is_empty() {
            cfg.model = arg.clone();
        }
        Ok(Box::new(RemoteEmbedder::new(cfg).map_err(|e| e.to_string())?) as Box<dyn Embedder>)
    });
    r
}

/// Builds an embedder from an id like `local_hash:256`.
pub fn embedder(id: &str) -> Result<Box<dyn Embedder>, RegistryError> {
    let (name, arg) = id.split_once(':').unwrap_or((id, ""));
    embedders().build(name, &arg.to_string())
}

/// How to reach an environment. `command` is only used by `external`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnvOptions {
    pub command: Vec<String>,
    pub env_name: Option<String>,
    pub timeout: Option<Duration>,
}

pub fn environments() -> Registry<dyn Environment, EnvOptions> {
    let mut r = Registry::new("environment");
    r.register("miniworld", |_: &EnvOptions| {
        Ok(Box::new(MiniWorld::new()) as Box<dyn Environment>)
    });
    r.register("external", |o: &EnvOptions| {
        let (program, args) = o
            .command
            .split_first()
            .ok_or("external environment needs a command")?;
        let mut launch = LaunchSpec::new(program);
        launch.args = args.to_vec();
        if let Some(name) = &o.env_name {
            launch.env_name = name.clone();
        }
        if let Some(t) = o.timeout {
            launch.timeout = t;
        }
        Ok(Box::new(connect_external(&launch).map_err(|e| e.to_string())?) as Box<dyn Environment>)
    });
    r
}

pub fn tie_breaks() -> Registry<dyn TieBreak, ()> {
    let mut r = Registry::new("tie policy");
    r.register("lexicographic", |_: &()| {
        Ok(Box::new(Lexicographic) as Box<dyn TieBreak>)
    });
    r.register("seeded_shuffle", |_: &()| {
        Ok(Box::new(SeededShuffle) as Box<dyn TieBreak>)
    });
    r
}

pub fn tie_break(name: &str) -> Result<Box<dyn TieBreak>, RegistryError> {
    tie_breaks().build(name, &())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyKind;

    #[test]
    fn builds_by_name() {
        assert_eq!(
            tie_break("seeded_shuffle").unwrap().name(),
            "seeded_shuffle"
        );
        assert_eq!(embedder("local_hash:64").unwrap().dim(), Some(64));
        assert_eq!(
            embedder("local_hash").unwrap().dim(),
            Some(DEFAULT_LOCAL_DIM)
        );
        let p = policies()
            .build(
                "naive_placer",
                &PolicyConfig::local(PolicyKind::NaivePlacer),
            )
            .unwrap();
        assert_eq!(p.name(), "naive_placer");
        assert_eq!(
            environments()
                .build("miniworld", &EnvOptions::default())
                .unwrap()
                .name(),
            "miniworld"
        );
    }

    #[test]
    fn unknown_names_list_known_ones() {
        let err = tie_break("random").unwrap_err().to_string();
        assert!(err.contains("lexicographic, seeded_shuffle"), "{err}");
        assert!(environments()
            .build("external", &EnvOptions::default())
            .is_err());
    }

    #[test]
    fn custom_variant() {
        let mut r = tie_breaks();
        r.register("also_lex", |_: &()| {
            Ok(Box::new(Lexicographic) as Box<dyn TieBreak>)
        });
        assert!(r.contains("also_lex"));
        assert_eq!(r.names().count(), 3);
    }
}
