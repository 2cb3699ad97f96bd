//! Knowledge base of the toy world: two intents, their canonical workflow
//! sentences, and the phrases bots use when acting them out.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intent {
    Refund,
    Shipping,
}

impl Intent {
    /// Guess from free text; ties go to `Refund`.
    pub fn detect(text: &str) -> Intent {
        let t = text.to_lowercase();
        let count = |words: &[&str]| words.iter().map(|w| t.matches(w).count()).sum::<usize>();
        let refund = count(&["charge", "never placed", "refund", "dispute"]);
        let shipping = count(&["shipping", "arrived", "delivery", "package", "in transit"]);
        if shipping > refund {
            Intent::Shipping
        } else {
            Intent::Refund
        }
    }

    pub fn items(self) -> &'static [Item] {
        match self {
            Intent::Refund => REFUND_ITEMS,
            Intent::Shipping => SHIPPING_ITEMS,
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Intent::Refund => "Refund for an order never placed",
            Intent::Shipping => "Order has not arrived yet",
        }
    }

    pub fn opener(self) -> &'static str {
        match self {
            Intent::Refund => "Hi, I was charged for an order I never placed and I want my money back.",
            Intent::Shipping => "Hi, my order still hasn't arrived and I'd like to know what is going on.",
        }
    }

    /// Sub-flow descriptions in graph enumeration order.
    pub fn subflows(self) -> Vec<String> {
        match self {
            Intent::Refund => {
                let mut out = Vec::new();
                for id in ["account ID", "full name"] {
                    out.push(format!("identity: {id}; system error: error"));
                    for level in ["bronze", "gold", "guest", "silver"] {
                        out.push(format!("identity: {id}; system error: no error; membership: {level}"));
                    }
                }
                out
            }
            Intent::Shipping => vec![
                "shipping status: delivered".to_string(),
                "shipping status: in transit; membership: bronze or guest".to_string(),
                "shipping status: in transit; membership: gold or silver".to_string(),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Item {
    pub key: &'static str,
    pub sentence: &'static str,
    /// Lowercase phrase whose presence in past conversations shows the step.
    pub evidence: &'static str,
    pub question: &'static str,
}

pub const REFUND_ITEMS: &[Item] = &[
    Item {
        key: "identify",
        sentence: "Ask the customer for their full name or account ID.",
        evidence: "full name or account id",
        question: "What does the agent ask for first?",
    },
    Item {
        key: "validate",
        sentence: "Ask for the username, email address and order ID to validate the purchase.",
        evidence: "username",
        question: "How does the agent validate the purchase?",
    },
    Item {
        key: "check_error",
        sentence: "Check whether the system shows an error for the charge.",
        evidence: "system error",
        question: "What does the agent check after validating the purchase?",
    },
    Item {
        key: "reverse",
        sentence: "If the system shows an error, reverse the charge and end the conversation.",
        evidence: "reversed the charge",
        question: "What happens if the system shows an error?",
    },
    Item {
        key: "membership",
        sentence: "If there is no error, ask for the membership level.",
        evidence: "membership level",
        question: "What happens if there is no error?",
    },
    Item {
        key: "gold",
        sentence: "If the membership level is gold, issue a full refund.",
        evidence: "full refund",
        question: "What does a gold member get?",
    },
    Item {
        key: "silver",
        sentence: "If the membership level is silver, approve the refund.",
        evidence: "approved your refund",
        question: "What does a silver member get?",
    },
    Item {
        key: "bronze",
        sentence: "If the membership level is bronze, offer store credit.",
        evidence: "store credit",
        question: "What does a bronze member get?",
    },
    Item {
        key: "guest",
        sentence: "If the customer is a guest, open a dispute ticket.",
        evidence: "dispute ticket",
        question: "What happens when the customer is a guest?",
    },
];

pub const SHIPPING_ITEMS: &[Item] = &[
    Item {
        key: "order",
        sentence: "Ask the customer for their order ID.",
        evidence: "order id",
        question: "What does the agent ask for first?",
    },
    Item {
        key: "status",
        sentence: "Ask for the shipping status shown in the customer's account.",
        evidence: "shipping status",
        question: "What does the agent ask for after the order ID?",
    },
    Item {
        key: "transit",
        sentence: "If the order is in transit, ask for the membership level.",
        evidence: "membership level",
        question: "What happens if the order is in transit?",
    },
    Item {
        key: "express",
        sentence: "If the membership level is gold or silver, upgrade the order to express shipping.",
        evidence: "express shipping",
        question: "What do gold and silver members get?",
    },
    Item {
        key: "estimate",
        sentence: "If the membership level is bronze or guest, send an updated delivery estimate.",
        evidence: "delivery estimate",
        question: "What do bronze members and guests get?",
    },
    Item {
        key: "claim",
        sentence: "If the order shows as delivered, file a missing package claim.",
        evidence: "missing package claim",
        question: "What happens if the order shows as delivered?",
    },
];

pub const ACCOUNT_ONLY_SENTENCE: &str = "Ask the customer for their account ID.";
pub const GOLD_CREDIT_SENTENCE: &str = "If the membership level is gold, offer store credit.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    FullName,
    AccountId,
    Username,
    Email,
    OrderId,
    Membership,
    ShippingStatus,
}

impl Slot {
    pub const ALL: [Slot; 7] =
        [Slot::FullName, Slot::AccountId, Slot::Username, Slot::Email, Slot::OrderId, Slot::Membership, Slot::ShippingStatus];

    pub fn label(self) -> &'static str {
        match self {
            Slot::FullName => "full name",
            Slot::AccountId => "account ID",
            Slot::Username => "username",
            Slot::Email => "email address",
            Slot::OrderId => "order ID",
            Slot::Membership => "membership level",
            Slot::ShippingStatus => "shipping status",
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Slot::FullName => "full name",
            Slot::AccountId => "account id",
            Slot::Username => "username",
            Slot::Email => "email",
            Slot::OrderId => "order id",
            Slot::Membership => "membership",
            Slot::ShippingStatus => "shipping status",
        }
    }

    pub fn key(self) -> String {
        self.label().to_lowercase().replace(' ', "_")
    }

    pub fn from_label(label: &str) -> Option<Slot> {
        let l = label.trim().to_lowercase();
        Slot::ALL.into_iter().find(|s| s.label().to_lowercase() == l || (l == "email" && *s == Slot::Email))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Reverse,
    FullRefund,
    ApproveRefund,
    StoreCredit,
    Dispute,
    Express,
    Estimate,
    Claim,
}

impl Outcome {
    pub const ALL: [Outcome; 8] = [
        Outcome::Reverse,
        Outcome::FullRefund,
        Outcome::ApproveRefund,
        Outcome::StoreCredit,
        Outcome::Dispute,
        Outcome::Express,
        Outcome::Estimate,
        Outcome::Claim,
    ];

    /// Phrase that names the action in a workflow sentence.
    pub fn workflow_phrase(self) -> &'static str {
        match self {
            Outcome::Reverse => "reverse the charge",
            Outcome::FullRefund => "full refund",
            Outcome::ApproveRefund => "approve the refund",
            Outcome::StoreCredit => "store credit",
            Outcome::Dispute => "dispute ticket",
            Outcome::Express => "express shipping",
            Outcome::Estimate => "delivery estimate",
            Outcome::Claim => "missing package claim",
        }
    }

    pub fn utterance(self) -> &'static str {
        match self {
            Outcome::Reverse => "I have reversed the charge.",
            Outcome::FullRefund => "I have issued a full refund to your original payment method.",
            Outcome::ApproveRefund => "I have approved your refund.",
            Outcome::StoreCredit => "I have added store credit to your account.",
            Outcome::Dispute => "I have opened a dispute ticket for this charge.",
            Outcome::Express => "I have upgraded your order to express shipping.",
            Outcome::Estimate => "I have sent you an updated delivery estimate.",
            Outcome::Claim => "I have filed a missing package claim for your order.",
        }
    }

    /// Lowercase phrase that shows the action happened in a dialog.
    pub fn marker(self) -> &'static str {
        match self {
            Outcome::Reverse => "reversed the charge",
            Outcome::FullRefund => "full refund",
            Outcome::ApproveRefund => "approved your refund",
            Outcome::StoreCredit => "store credit",
            Outcome::Dispute => "dispute ticket",
            Outcome::Express => "express shipping",
            Outcome::Estimate => "delivery estimate",
            Outcome::Claim => "missing package claim",
        }
    }

    pub fn criteria(self) -> &'static str {
        match self {
            Outcome::Reverse => "The agent reverses the charge.",
            Outcome::FullRefund => "The agent issues a full refund.",
            Outcome::ApproveRefund => "The agent approves the refund.",
            Outcome::StoreCredit => "The agent offers store credit.",
            Outcome::Dispute => "The agent opens a dispute ticket.",
            Outcome::Express => "The agent upgrades the order to express shipping.",
            Outcome::Estimate => "The agent sends an updated delivery estimate.",
            Outcome::Claim => "The agent files a missing package claim.",
        }
    }

    pub fn past(self) -> &'static str {
        match self {
            Outcome::Reverse => "reversed the charge",
            Outcome::FullRefund => "issued a full refund",
            Outcome::ApproveRefund => "approved the refund",
            Outcome::StoreCredit => "added store credit",
            Outcome::Dispute => "opened a dispute ticket",
            Outcome::Express => "upgraded the order to express shipping",
            Outcome::Estimate => "sent an updated delivery estimate",
            Outcome::Claim => "filed a missing package claim",
        }
    }

    pub fn from_criteria(text: &str) -> Option<Outcome> {
        let t = text.to_lowercase();
        let key = |o: Outcome| match o {
            Outcome::Reverse => "reverses the charge",
            Outcome::ApproveRefund => "approves the refund",
            other => other.workflow_phrase(),
        };
        Outcome::ALL.into_iter().find(|o| t.contains(key(*o)))
    }
}

pub const ERROR_STATEMENT: &str = "I see a system error on this charge.";
pub const NO_ERROR_STATEMENT: &str = "There is no system error on this charge.";
pub const DONT_HAVE: &str = "I don't have the requested information. Is there any other information I can provide?";
pub const STUCK_MISSING: &str = "I'm sorry, I cannot continue without that information.";
pub const STUCK_NO_STEP: &str = "I'm sorry, I am not able to resolve this request.";
pub const THANKS: &str = "Thank you, that's everything I needed.";
pub const ACK: &str = "Okay, thank you.";
