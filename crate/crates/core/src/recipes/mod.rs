//! Steps, shared init/finalize templates, recipes built from them, planning
//! and execution wired into tool adapters and the fault engine.

mod plan;
mod run;

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleanroom::CleanroomError;
use crate::faults::{ErrorClass, Outcome, ResourceOwner};
use crate::template::UnknownPlaceholder;
use crate::tooladapt::ToolError;

pub use plan::{plan, plan_joint, ExecutionPlan, PlanEntry};
pub use run::{run_plan, run_recipe, RecipeFailure, RecipeResult, RunContext, TraceEntry};

pub const RECIPE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Core,
    Finalize,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub requires_tools: Vec<String>,
    #[serde(default)]
    pub requires_resources: Vec<String>,
    /// Shell command template rendered against the run context and inputs.
    pub action: String,
    /// Artifact paths (templates, relative to the base directory).
    #[serde(default)]
    pub produces: Vec<String>,
    #[serde(default)]
    pub shared: bool,
    /// Only meaningful in a finalize phase: run even after an earlier failure.
    #[serde(default = "yes")]
    pub always_run: bool,
    /// The action consumes user-authored input (sources, options).
    #[serde(default)]
    pub user_input: bool,
    /// Exit codes by which the tool reports a problem in the user's input;
    /// empty means any failure does.
    #[serde(default)]
    pub user_exit_codes: Vec<u8>,
}

impl Step {
    pub fn new(id: &str, action: &str) -> Self {
        Step {
            id: id.into(),
            description: String::new(),
            requires_tools: Vec::new(),
            requires_resources: Vec::new(),
            action: action.into(),
            produces: Vec::new(),
            shared: false,
            always_run: true,
            user_input: false,
            user_exit_codes: Vec::new(),
        }
    }

    pub fn blames_user(&self, exit_code: u8) -> bool {
        self.user_input && (self.user_exit_codes.is_empty() || self.user_exit_codes.contains(&exit_code))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub init_steps: Vec<String>,
    pub finalize_steps: Vec<String>,
}

pub fn make_template(init: &[&str], finalize: &[&str]) -> Result<TaskTemplate, RecipeError> {
    let init: Vec<String> = init.iter().map(|s| s.to_string()).collect();
    let finalize: Vec<String> = finalize.iter().map(|s| s.to_string()).collect();
    let template = TaskTemplate { init_steps: init, finalize_steps: finalize };
    template.validate()?;
    Ok(template)
}

impl TaskTemplate {
    pub fn validate(&self) -> Result<(), RecipeError> {
        let overlap: Vec<String> = self.init_steps.iter().filter(|s| self.finalize_steps.contains(s)).cloned().collect();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(RecipeError::OverlappingPhases(overlap))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputParam {
    pub name: String,
    pub default: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_category")]
    pub category: String,
    #[serde(flatten)]
    pub template: TaskTemplate,
    #[serde(default, rename = "core")]
    pub core_steps: Vec<String>,
    #[serde(default)]
    pub constraints: Vec<(String, String)>,
    #[serde(default, rename = "input")]
    pub inputs: Vec<InputParam>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

fn default_category() -> String {
    "general".into()
}

impl Recipe {
    pub fn new(name: &str, template: TaskTemplate, core_steps: &[&str]) -> Self {
        Recipe {
            name: name.into(),
            description: String::new(),
            category: default_category(),
            template,
            core_steps: core_steps.iter().map(|s| s.to_string()).collect(),
            constraints: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// All referenced step ids with their phase, in declaration order.
    pub fn phased_steps(&self) -> Vec<(&str, Phase)> {
        let t = &self.template;
        t.init_steps
            .iter()
            .map(|s| (s.as_str(), Phase::Init))
            .chain(self.core_steps.iter().map(|s| (s.as_str(), Phase::Core)))
            .chain(t.finalize_steps.iter().map(|s| (s.as_str(), Phase::Finalize)))
            .collect()
    }

    /// Defaults overlaid with `given`; unknown names are rejected.
    pub fn resolve_inputs(&self, given: &BTreeMap<String, String>) -> Result<BTreeMap<String, String>, RecipeError> {
        let mut values: BTreeMap<String, String> = self.inputs.iter().map(|p| (p.name.clone(), p.default.clone())).collect();
        for (k, v) in given {
            if !values.contains_key(k) {
                return Err(RecipeError::InputInvalid(format!("recipe {} has no input {k:?}", self.name)));
            }
            values.insert(k.clone(), v.clone());
        }
        Ok(values)
    }
}

/// A resource a step requires, located under one of the context roots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceDef {
    pub key: String,
    /// Context variable naming the root directory (`site`, `base_dir`).
    pub root: String,
    /// Path template relative to the root.
    pub path: String,
    pub owner: ResourceOwner,
    /// Path template relative to the base directory; when that file exists
    /// the requirement is waived.
    #[serde(default)]
    pub unless: Option<String>,
}

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("init and finalize share steps: {}", .0.join(", "))]
    OverlappingPhases(Vec<String>),
    #[error("ordering constraints form a cycle: {}", .0.join(" -> "))]
    CyclicConstraints(Vec<String>),
    #[error("recipe {recipe} references undefined step {step}")]
    UnknownStep { recipe: String, step: String },
    #[error("recipe {recipe} lists step {step} more than once")]
    DuplicateStep { recipe: String, step: String },
    #[error("no recipe named {0}")]
    UnknownRecipe(String),
    #[error("recipe {0} is already registered")]
    DuplicateRecipe(String),
    #[error("step {0} is already registered with a different definition")]
    DuplicateStepDefinition(String),
    #[error("no resource named {0}")]
    UnknownResource(String),
    #[error("invalid input: {0}")]
    InputInvalid(String),
    #[error("recipe text is invalid: {0}")]
    BadFormat(String),
    #[error("{0}")]
    RecipeFailed(Box<RecipeFailure>),
    #[error(transparent)]
    Template(#[from] UnknownPlaceholder),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Session(#[from] CleanroomError),
}

impl RecipeError {
    pub fn class(&self) -> Option<ErrorClass> {
        match self {
            RecipeError::RecipeFailed(f) => Some(f.class),
            RecipeError::InputInvalid(_) => Some(ErrorClass::UserAction),
            _ => None,
        }
    }

    pub fn failure(&self) -> Option<&RecipeFailure> {
        match self {
            RecipeError::RecipeFailed(f) => Some(f),
            _ => None,
        }
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        self.failure().and_then(|f| f.outcome.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecipeInfo {
    pub name: String,
    pub category: String,
    pub description: String,
    pub inputs: Vec<InputParam>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipeFile {
    format_version: u32,
    #[serde(default, rename = "step")]
    steps: Vec<Step>,
    #[serde(default, rename = "resource")]
    resources: Vec<ResourceDef>,
    #[serde(default, rename = "recipe")]
    recipes: Vec<Recipe>,
}

#[derive(Debug, Clone, Default)]
pub struct RecipeRegistry {
    steps: IndexMap<String, Step>,
    resources: IndexMap<String, ResourceDef>,
    recipes: BTreeMap<String, Recipe>,
}

impl RecipeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut reg = Self::new();
        reg.load_text(include_str!("../../data/recipes.toml")).expect("built-in recipes are valid");
        reg
    }

    /// Register a step. Re-registering an identical definition is a no-op.
    pub fn add_step(&mut self, step: Step) -> Result<(), RecipeError> {
        match self.steps.get(&step.id) {
            Some(existing) if existing == &step => Ok(()),
            Some(_) => Err(RecipeError::DuplicateStepDefinition(step.id)),
            None => {
                self.steps.insert(step.id.clone(), step);
                Ok(())
            }
        }
    }

    pub fn add_resource(&mut self, def: ResourceDef) {
        self.resources.insert(def.key.clone(), def);
    }

    pub fn add_recipe(&mut self, recipe: Recipe) -> Result<(), RecipeError> {
        if self.recipes.contains_key(&recipe.name) {
            return Err(RecipeError::DuplicateRecipe(recipe.name));
        }
        self.check(&recipe)?;
        self.recipes.insert(recipe.name.clone(), recipe);
        Ok(())
    }

    /// Recipe invariants short of acyclicity, which planning reports.
    pub fn check(&self, recipe: &Recipe) -> Result<(), RecipeError> {
        recipe.template.validate()?;
        let mut seen = BTreeSet::new();
        for (id, _) in recipe.phased_steps() {
            if !self.steps.contains_key(id) {
                return Err(RecipeError::UnknownStep { recipe: recipe.name.clone(), step: id.into() });
            }
            if !seen.insert(id) {
                return Err(RecipeError::DuplicateStep { recipe: recipe.name.clone(), step: id.into() });
            }
        }
        for (a, b) in &recipe.constraints {
            for id in [a, b] {
                if !seen.contains(id.as_str()) {
                    return Err(RecipeError::UnknownStep { recipe: recipe.name.clone(), step: id.clone() });
                }
            }
        }
        for id in seen {
            for key in &self.steps[id].requires_resources {
                if !self.resources.contains_key(key) {
                    return Err(RecipeError::UnknownResource(key.clone()));
                }
            }
        }
        Ok(())
    }

    /// Parse the recipe text format and register everything in it.
    pub fn load_text(&mut self, text: &str) -> Result<(), RecipeError> {
        let file: RecipeFile = toml::from_str(text).map_err(|e| RecipeError::BadFormat(e.to_string()))?;
        if file.format_version != RECIPE_FORMAT_VERSION {
            return Err(RecipeError::BadFormat(format!("unsupported format_version {}", file.format_version)));
        }
        for step in file.steps {
            self.add_step(step)?;
        }
        for def in file.resources {
            self.add_resource(def);
        }
        for recipe in file.recipes {
            self.add_recipe(recipe)?;
        }
        Ok(())
    }

    pub fn step(&self, id: &str) -> Option<&Step> {
        self.steps.get(id)
    }

    pub fn resource(&self, key: &str) -> Option<&ResourceDef> {
        self.resources.get(key)
    }

    pub fn recipe(&self, name: &str) -> Result<&Recipe, RecipeError> {
        self.recipes.get(name).ok_or_else(|| RecipeError::UnknownRecipe(name.into()))
    }

    pub fn recipes(&self) -> impl Iterator<Item = &Recipe> {
        self.recipes.values()
    }
}

pub fn list_recipes(registry: &RecipeRegistry) -> Vec<RecipeInfo> {
    registry
        .recipes()
        .map(|r| RecipeInfo {
            name: r.name.clone(),
            category: r.category.clone(),
            description: r.description.clone(),
            inputs: r.inputs.clone(),
        })
        .collect()
}
