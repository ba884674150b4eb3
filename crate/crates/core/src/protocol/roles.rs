use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Configurator,
    Coordinator,
    Selector,
    Trainer,
    Updater,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Configurator,
        Role::Coordinator,
        Role::Selector,
        Role::Trainer,
        Role::Updater,
    ];

    pub fn activities(self) -> &'static [Activity] {
        use Activity::*;
        match self {
            Role::Configurator => &[
                DefineInitialMLModel,
                DefineInterimResult,
                RegisterCoalition,
                AwaitApplications,
                DecideOnApplication,
            ],
            Role::Coordinator => &[AwaitApplications, DecideOnApplication],
            Role::Selector => &[AwaitReadinessSignal, SelectAgent],
            Role::Trainer => &[AwaitSelectionSignal, TrainMLModel],
            Role::Updater => &[AwaitSelectionSignal, AwaitInterimResults, UpdateMLModel],
        }
    }

    pub fn protocols(self) -> &'static [ProtocolKind] {
        use ProtocolKind::*;
        match self {
            Role::Configurator => &[ApplyForCoalition, InformApplicant, ProvideMLTask],
            Role::Coordinator => &[
                ApplyForCoalition,
                InformApplicant,
                ProvideMLTask,
                AssignInterimResultRecipient,
            ],
            Role::Selector => &[ApplyForCoalition, AnnounceAgentSelection],
            Role::Trainer | Role::Updater => &[ApplyForCoalition, SignalReadiness, TransmitInterimResult],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Activity {
    #[serde(rename = "defineInitialMLModel")]
    DefineInitialMLModel,
    #[serde(rename = "defineInterimResult")]
    DefineInterimResult,
    #[serde(rename = "registerCoalition")]
    RegisterCoalition,
    #[serde(rename = "awaitApplications")]
    AwaitApplications,
    #[serde(rename = "decideOnApplication")]
    DecideOnApplication,
    #[serde(rename = "awaitReadinessSignal")]
    AwaitReadinessSignal,
    #[serde(rename = "selectAgent")]
    SelectAgent,
    #[serde(rename = "awaitSelectionSignal")]
    AwaitSelectionSignal,
    #[serde(rename = "trainMLModel")]
    TrainMLModel,
    #[serde(rename = "awaitInterimResults")]
    AwaitInterimResults,
    #[serde(rename = "updateMLModel")]
    UpdateMLModel,
}

impl Activity {
    pub const ALL: [Activity; 11] = [
        Activity::DefineInitialMLModel,
        Activity::DefineInterimResult,
        Activity::RegisterCoalition,
        Activity::AwaitApplications,
        Activity::DecideOnApplication,
        Activity::AwaitReadinessSignal,
        Activity::SelectAgent,
        Activity::AwaitSelectionSignal,
        Activity::TrainMLModel,
        Activity::AwaitInterimResults,
        Activity::UpdateMLModel,
    ];

    /// Roles whose activity list contains this activity.
    pub fn owners(self) -> BTreeSet<Role> {
        Role::ALL
            .into_iter()
            .filter(|r| r.activities().contains(&self))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProtocolKind {
    #[serde(rename = "applyForCoalition")]
    ApplyForCoalition,
    #[serde(rename = "informApplicant")]
    InformApplicant,
    #[serde(rename = "provideMLTask")]
    ProvideMLTask,
    #[serde(rename = "assignInterimResultRecipient")]
    AssignInterimResultRecipient,
    #[serde(rename = "signalReadiness")]
    SignalReadiness,
    #[serde(rename = "announceAgentSelection")]
    AnnounceAgentSelection,
    #[serde(rename = "transmitInterimResult")]
    TransmitInterimResult,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 7] = [
        ProtocolKind::ApplyForCoalition,
        ProtocolKind::InformApplicant,
        ProtocolKind::ProvideMLTask,
        ProtocolKind::AssignInterimResultRecipient,
        ProtocolKind::SignalReadiness,
        ProtocolKind::AnnounceAgentSelection,
        ProtocolKind::TransmitInterimResult,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::ApplyForCoalition => "applyForCoalition",
            ProtocolKind::InformApplicant => "informApplicant",
            ProtocolKind::ProvideMLTask => "provideMLTask",
            ProtocolKind::AssignInterimResultRecipient => "assignInterimResultRecipient",
            ProtocolKind::SignalReadiness => "signalReadiness",
            ProtocolKind::AnnounceAgentSelection => "announceAgentSelection",
            ProtocolKind::TransmitInterimResult => "transmitInterimResult",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initialization,
    Operation,
    Dissolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentType {
    Tra,
    CooSel,
    TraUpd,
    ConTraUpd,
    ConCooSelUpd,
    CooSelTraUpd,
    ConCooSelTraUpd,
}

impl AgentType {
    pub const ALL: [AgentType; 7] = [
        AgentType::Tra,
        AgentType::CooSel,
        AgentType::TraUpd,
        AgentType::ConTraUpd,
        AgentType::ConCooSelUpd,
        AgentType::CooSelTraUpd,
        AgentType::ConCooSelTraUpd,
    ];

    pub fn roles(self) -> BTreeSet<Role> {
        use Role::*;
        let list: &[Role] = match self {
            AgentType::Tra => &[Trainer],
            AgentType::CooSel => &[Coordinator, Selector],
            AgentType::TraUpd => &[Trainer, Updater],
            AgentType::ConTraUpd => &[Configurator, Trainer, Updater],
            AgentType::ConCooSelUpd => &[Configurator, Coordinator, Selector, Updater],
            AgentType::CooSelTraUpd => &[Coordinator, Selector, Trainer, Updater],
            AgentType::ConCooSelTraUpd => &[Configurator, Coordinator, Selector, Trainer, Updater],
        };
        list.iter().copied().collect()
    }

    pub fn has(self, role: Role) -> bool {
        self.roles().contains(&role)
    }

    /// Preset type with exactly this role set.
    pub fn from_roles(roles: &BTreeSet<Role>) -> Option<AgentType> {
        AgentType::ALL.into_iter().find(|t| &t.roles() == roles)
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentType::Tra => "Tra",
            AgentType::CooSel => "CooSel",
            AgentType::TraUpd => "TraUpd",
            AgentType::ConTraUpd => "ConTraUpd",
            AgentType::ConCooSelUpd => "ConCooSelUpd",
            AgentType::CooSelTraUpd => "CooSelTraUpd",
            AgentType::ConCooSelTraUpd => "ConCooSelTraUpd",
        }
    }

    pub fn may_perform(self, activity: Activity) -> bool {
        self.roles().iter().any(|r| r.activities().contains(&activity))
    }

    pub fn may_send(self, protocol: ProtocolKind) -> bool {
        self.roles().iter().any(|r| r.protocols().contains(&protocol))
    }
}

impl fmt::Display for AgentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_concatenate_role_prefixes() {
        for t in AgentType::ALL {
            let name: String = t
                .roles()
                .iter()
                .map(|r| match r {
                    Role::Configurator => "Con",
                    Role::Coordinator => "Coo",
                    Role::Selector => "Sel",
                    Role::Trainer => "Tra",
                    Role::Updater => "Upd",
                })
                .collect();
            assert_eq!(name, t.name());
        }
    }

    #[test]
    fn role_sets_round_trip() {
        for t in AgentType::ALL {
            assert_eq!(AgentType::from_roles(&t.roles()), Some(t));
        }
        let odd: BTreeSet<Role> = [Role::Configurator, Role::Selector].into_iter().collect();
        assert_eq!(AgentType::from_roles(&odd), None);
    }

    #[test]
    fn every_activity_has_an_owner() {
        for a in Activity::ALL {
            assert!(!a.owners().is_empty(), "{a:?}");
        }
        assert!(!AgentType::Tra.may_perform(Activity::UpdateMLModel));
        assert!(AgentType::TraUpd.may_perform(Activity::UpdateMLModel));
        assert!(!AgentType::TraUpd.may_send(ProtocolKind::AnnounceAgentSelection));
    }

    #[test]
    fn serde_names_match_protocol_names() {
        for p in ProtocolKind::ALL {
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.name()));
        }
    }
}
