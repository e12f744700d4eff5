// Console wiring: poll the snapshot, stream the journal, drive the forms.

import { ApiError, GatewayClient } from "./api.js";
import { subscribeEvents } from "./events.js";
import {
  applyConnectionLoss,
  applyEvent,
  applySnapshot,
  applyTicket,
  applyVerdict,
  initialViewState,
  type ViewState,
} from "./state.js";
import { parsePatchSidecar, resumeAfterAccept, submitPatch, ticketFiles } from "./repair.js";
import {
  renderBanner,
  renderFeed,
  renderGraph,
  renderMetrics,
  renderRegions,
  renderRepairPanel,
  renderTxTree,
} from "./render.js";
import type { ModelDoc, RegionRow } from "./types.js";

const baseUrl = (() => {
  const params = new URLSearchParams(window.location.search);
  return params.get("gateway") ?? "";
})();

const client = new GatewayClient(baseUrl);
let view: ViewState = initialViewState();
let model: ModelDoc | null = null;
let regions: RegionRow[] = [];

function byId(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing #${id}`);
  }
  return node;
}

function paint(): void {
  renderBanner(byId("banner"), view);
  if (model) {
    renderGraph(byId("graph"), model, view);
  }
  renderRegions(byId("regions"), regions, view);
  renderTxTree(byId("txs"), view);
  renderFeed(byId("feed"), view);
  renderRepairPanel(byId("repair"), view);
  const resume = byId("resume-button") as HTMLButtonElement;
  resume.disabled = !view.resumeEnabled;
}

async function refreshSnapshot(): Promise<void> {
  try {
    const state = await client.state();
    view = applySnapshot(view, state);
    const report = await client.report();
    renderMetrics(byId("metrics"), report.metrics);
    if (state.mode === "awaiting-repair" && !view.ticket) {
      view = applyTicket(view, await client.ticket());
      wireTicketDownloads();
    }
  } catch {
    view = applyConnectionLoss(view);
  }
  paint();
}

function wireTicketDownloads(): void {
  if (!view.ticket) {
    return;
  }
  const files = ticketFiles(view.ticket);
  const fragment = byId("download-fragment") as HTMLAnchorElement;
  fragment.href = URL.createObjectURL(new Blob([files.fragmentXml], { type: "application/xml" }));
  fragment.download = files.fragmentName;
  const sidecar = byId("download-sidecar") as HTMLAnchorElement;
  sidecar.href = URL.createObjectURL(new Blob([files.sidecarJson], { type: "application/json" }));
  sidecar.download = files.sidecarName;
}

async function readFile(input: HTMLInputElement): Promise<string> {
  const file = input.files?.[0];
  if (!file) {
    throw new Error("no file chosen");
  }
  return file.text();
}

function showFormError(id: string, message: string): void {
  byId(id).textContent = message;
}

async function onSubmitPatch(): Promise<void> {
  showFormError("repair-error", "");
  if (!view.ticket) {
    showFormError("repair-error", "no current ticket");
    return;
  }
  try {
    const fragmentXml = await readFile(byId("patch-fragment") as HTMLInputElement);
    const sidecarText = await readFile(byId("patch-sidecar") as HTMLInputElement);
    const sidecar = parsePatchSidecar(sidecarText);
    const outcome = await submitPatch(client, view.ticket, {
      fragmentXml,
      scenarioPatch: sidecar.scenarioPatch,
      reuseCompleted: sidecar.reuseCompleted,
    });
    view = applyVerdict(view, outcome.verdict);
    if (outcome.swappedTicket) {
      view = { ...applyTicket(view, outcome.swappedTicket), verdict: outcome.verdict };
      wireTicketDownloads();
    }
  } catch (err) {
    showFormError("repair-error", err instanceof ApiError ? err.message : String(err));
  }
  paint();
}

async function onResume(): Promise<void> {
  try {
    await resumeAfterAccept(client);
    view = { ...view, resumeEnabled: false };
    await refreshSnapshot();
  } catch (err) {
    showFormError("repair-error", err instanceof ApiError ? err.message : String(err));
    paint();
  }
}

async function onInjectFault(): Promise<void> {
  showFormError("fault-error", "");
  const task = (byId("fault-task") as HTMLInputElement).value.trim();
  const attempt = Number((byId("fault-attempt") as HTMLInputElement).value || "1");
  const kind = (byId("fault-kind") as HTMLSelectElement).value;
  const participant = (byId("fault-participant") as HTMLInputElement).value.trim();
  const message = (byId("fault-message") as HTMLInputElement).value;
  try {
    await client.injectFault({
      task,
      attempt,
      kind,
      message,
      ...(kind === "prepare-no" ? { participant } : {}),
    });
    const row = document.createElement("li");
    row.textContent = `${task} attempt ${attempt} (${kind}): ${message}`;
    byId("fault-list").appendChild(row);
  } catch (err) {
    showFormError("fault-error", err instanceof ApiError ? err.message : String(err));
  }
}

async function start(): Promise<void> {
  try {
    model = await client.model();
    regions = await client.regions();
  } catch {
    view = applyConnectionLoss(view);
    paint();
    setTimeout(start, 2000);
    return;
  }
  await refreshSnapshot();
  const feed = subscribeEvents(baseUrl, 0, {
    onEntry: (entry) => {
      view = applyEvent(view, entry);
      paint();
    },
    onClose: () => {
      view = applyConnectionLoss(view);
      paint();
      setTimeout(start, 2000);
    },
  });
  window.addEventListener("beforeunload", feed.stop);
  setInterval(refreshSnapshot, 1500);
}

byId("submit-patch").addEventListener("click", () => void onSubmitPatch());
byId("resume-button").addEventListener("click", () => void onResume());
byId("inject-fault").addEventListener("click", () => void onInjectFault());
byId("run-button").addEventListener("click", () => void client.run().then(refreshSnapshot));
byId("step-button").addEventListener("click", () => void client.step(1).then(refreshSnapshot));

void start();
