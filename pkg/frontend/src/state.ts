// ViewState is a pure projection of gateway responses. Reducers return new
// objects and never re-derive engine facts (verdicts, statuses) locally.

import type {
  JournalEntry,
  StateDoc,
  TicketDoc,
  VerdictDoc,
} from "./types.js";

export interface ViewState {
  mode: string;
  nodes: Record<string, string>;
  txs: StateDoc["txs"];
  router: StateDoc["router"];
  selections: StateDoc["selections"];
  failure: StateDoc["failure"];
  failingTask: string | null;
  ledgerHeight: number;
  feed: JournalEntry[];
  lastSeq: number;
  feedGap: { expected: number; got: number } | null;
  ticket: TicketDoc | null;
  verdict: VerdictDoc | null;
  resumeEnabled: boolean;
  banner: { tone: "idle" | "running" | "success" | "failure"; text: string };
  connectionLost: boolean;
}

export function initialViewState(): ViewState {
  return {
    mode: "unknown",
    nodes: {},
    txs: [],
    router: {},
    selections: [],
    failure: null,
    failingTask: null,
    ledgerHeight: 0,
    feed: [],
    lastSeq: 0,
    feedGap: null,
    ticket: null,
    verdict: null,
    resumeEnabled: false,
    banner: { tone: "idle", text: "No session loaded" },
    connectionLost: false,
  };
}

function bannerFor(state: StateDoc): ViewState["banner"] {
  if (state.mode === "done-success") {
    const committed = state.txs.filter(
      (tx) => tx.parent === null && tx.status === "Committed",
    ).length;
    return { tone: "success", text: `Success: ${committed} top-level transactions committed` };
  }
  if (state.mode === "awaiting-repair" && state.failure) {
    return {
      tone: "failure",
      text: `Failure in ${state.failure.logicalName}: ${state.failure.message}`,
    };
  }
  if (state.mode === "done-failed") {
    return { tone: "failure", text: "Session failed" };
  }
  if (state.mode === "running") {
    return { tone: "running", text: "Running" };
  }
  return { tone: "idle", text: state.mode };
}

export function applySnapshot(view: ViewState, state: StateDoc): ViewState {
  return {
    ...view,
    mode: state.mode,
    nodes: state.nodes,
    txs: state.txs,
    router: state.router,
    selections: state.selections,
    failure: state.failure,
    failingTask: state.mode === "awaiting-repair" ? state.failure?.taskId ?? null : null,
    ledgerHeight: state.ledgerHeight,
    banner: bannerFor(state),
    connectionLost: false,
  };
}

export function applyEvent(view: ViewState, entry: JournalEntry): ViewState {
  const gap =
    view.lastSeq > 0 && entry.seq !== view.lastSeq + 1
      ? { expected: view.lastSeq + 1, got: entry.seq }
      : view.feedGap;
  return {
    ...view,
    feed: [...view.feed, entry],
    lastSeq: entry.seq,
    feedGap: gap,
  };
}

export function applyTicket(view: ViewState, ticket: TicketDoc): ViewState {
  return { ...view, ticket, verdict: null, resumeEnabled: false };
}

/** The verdict is stored exactly as the server sent it; acceptance is the
 * only thing that arms the Resume button. */
export function applyVerdict(view: ViewState, verdict: VerdictDoc): ViewState {
  return {
    ...view,
    verdict,
    resumeEnabled: verdict.verdict === "accepted",
  };
}

export function applyConnectionLoss(view: ViewState): ViewState {
  return {
    ...view,
    connectionLost: true,
    banner: { tone: "failure", text: "Connection to the gateway lost; retrying" },
  };
}

export function verdictDisplay(verdict: VerdictDoc): string {
  return verdict.verdict;
}
