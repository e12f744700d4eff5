// Response shapes of the txforge gateway API. The console renders these
// as-is: it never derives its own verdicts or transaction states.

export interface SessionInfo {
  modelHash: string;
  scenarioHash: string;
  mode: string;
  steps: number;
  journalEntries: number;
}

export interface ModelElement {
  id: string;
  kind: string;
  name: string;
  lane: string | null;
}

export interface ModelFlow {
  id: string;
  source: string;
  target: string;
  guard: string | null;
  default: boolean;
}

export interface ModelDoc {
  id: string;
  elements: ModelElement[];
  flows: ModelFlow[];
  lanes: Record<string, { actor: string; members: string[] }>;
}

export interface RegionRow {
  regionId: string;
  entry: string;
  exit: string;
  members: string[];
  size: number;
  in?: string[];
  requiredOut?: string[];
}

export interface TxInfo {
  txId: string;
  logicalName: string;
  version: number;
  status: string;
  parent: string | null;
  participants: string[];
}

export interface FailureInfo {
  txId: string;
  logicalName: string;
  taskId: string;
  message: string;
  attempt: number;
}

export interface StateDoc {
  mode: string;
  nodes: Record<string, string>;
  txs: TxInfo[];
  router: Record<string, { active: number; history: number[] }>;
  selections: { name: string; members: string[] }[];
  failure: FailureInfo | null;
  ticketId: string | null;
  ledgerHeight: number;
}

export interface JournalEntry {
  seq: number;
  kind: string;
  [key: string]: unknown;
}

export interface TicketDoc {
  ticketId: string;
  logicalName: string;
  fragmentXml: string;
  in: string[];
  requiredOut: string[];
  cause: { taskId: string; message: string; attempt: number };
  completedTasks: { taskId: string; writes: [string, unknown][]; actor: string }[];
  escalationDepth: number;
  sidecar: Record<string, unknown>;
}

export interface VerdictReason {
  check: string;
  detail: string;
  offendingVars: string[];
}

export interface VerdictDoc {
  verdict: string;
  reasons: VerdictReason[];
  target: string | null;
  newVersion?: number;
  newTicketId?: string;
  logicalName?: string;
}

export interface ReportDoc {
  mode: string;
  ledger: {
    height: number;
    blocks: { height: number; txId: string; hash: string }[];
    dumpHash: string;
  };
  router: Record<string, { active: number; history: number[] }>;
  metrics: {
    messages2pc: Record<string, number>;
    taskAttempts: Record<string, number>;
    steps: number;
  };
  journalEntries: number;
  failure: FailureInfo | null;
  state: Record<string, unknown>;
}

export interface PatchUpload {
  ticketId: string;
  fragmentXml: string;
  scenarioPatch: Record<string, unknown>;
  reuseCompleted: string[];
}
