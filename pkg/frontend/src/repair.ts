// The repair workflow: ticket download, patch upload, verdict display,
// escalation swap, resume. Every decision comes from the server.

import type { GatewayClient } from "./api.js";
import type { TicketDoc, VerdictDoc } from "./types.js";

export interface TicketFiles {
  fragmentName: string;
  fragmentXml: string;
  sidecarName: string;
  sidecarJson: string;
}

export function ticketFiles(ticket: TicketDoc): TicketFiles {
  return {
    fragmentName: `${ticket.logicalName}.fragment.bpmn`,
    fragmentXml: ticket.fragmentXml,
    sidecarName: `${ticket.logicalName}.ticket.json`,
    sidecarJson: JSON.stringify(ticket.sidecar, null, 2) + "\n",
  };
}

export interface PatchInput {
  fragmentXml: string;
  scenarioPatch: Record<string, unknown>;
  reuseCompleted: string[];
}

export function parsePatchSidecar(text: string): {
  ticketId?: string;
  scenarioPatch: Record<string, unknown>;
  reuseCompleted: string[];
} {
  const doc = JSON.parse(text) as Record<string, unknown>;
  return {
    ticketId: doc.ticketId as string | undefined,
    scenarioPatch: (doc.scenarioPatch as Record<string, unknown>) ?? {},
    reuseCompleted: (doc.reuseCompleted as string[]) ?? [],
  };
}

export interface RepairOutcome {
  verdict: VerdictDoc;
  /** Present when the verdict escalated: the parent's ticket now current. */
  swappedTicket: TicketDoc | null;
}

/**
 * Upload a patch for the current ticket. Returns the server verdict
 * verbatim; on escalation the freshly-current parent ticket is fetched so
 * the panel can swap to it.
 */
export async function submitPatch(
  client: GatewayClient,
  ticket: TicketDoc,
  patch: PatchInput,
): Promise<RepairOutcome> {
  const verdict = await client.submitPatch({
    ticketId: ticket.ticketId,
    fragmentXml: patch.fragmentXml,
    scenarioPatch: patch.scenarioPatch,
    reuseCompleted: patch.reuseCompleted,
  });
  let swappedTicket: TicketDoc | null = null;
  if (verdict.verdict === "escalated") {
    swappedTicket = await client.ticket();
  }
  return { verdict, swappedTicket };
}

export async function resumeAfterAccept(client: GatewayClient) {
  return client.resume();
}
