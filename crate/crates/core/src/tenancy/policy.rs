use serde::{Deserialize, Serialize};

use super::{Principal, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Chat,
    ListOwnConversations,
    ViewOwnKey,
    ListMembers,
    ViewBudget,
    ModifyBudget,
    IssueKey,
    RevokeKey,
    ViewUsage,
    EnrollMember,
    CreateCourse,
    RegisterBackend,
    ManageCollections,
}

impl Action {
    pub const ALL: [Action; 13] = [
        Action::Chat,
        Action::ListOwnConversations,
        Action::ViewOwnKey,
        Action::ListMembers,
        Action::ViewBudget,
        Action::ModifyBudget,
        Action::IssueKey,
        Action::RevokeKey,
        Action::ViewUsage,
        Action::EnrollMember,
        Action::CreateCourse,
        Action::RegisterBackend,
        Action::ManageCollections,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

/// Role/action policy table. Course scoping (an instructor acting only on
/// their own course) is checked by the caller against `Principal::course_id`.
pub fn policy(role: Role, action: Action) -> Decision {
    use Action::*;
    let allowed = match role {
        Role::Admin => true,
        Role::Instructor => matches!(
            action,
            Chat | ListOwnConversations
                | ViewOwnKey
                | ListMembers
                | ViewBudget
                | ModifyBudget
                | IssueKey
                | RevokeKey
                | ViewUsage
        ),
        Role::Student => matches!(action, Chat | ListOwnConversations | ViewOwnKey),
    };
    if allowed {
        Decision::Allow
    } else {
        Decision::Deny
    }
}

pub fn authorize(principal: &Principal, action: Action) -> Decision {
    policy(principal.role, action)
}
