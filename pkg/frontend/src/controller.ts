/** Session flow state machine, kept free of DOM so it is unit-testable. */

import { ApiError, AuditApi, AuditClass, NextCrop, Report } from "./api.js";

export type Phase = "loading" | "labeling" | "done" | "error";

/** Everything the page needs to render one moment of the session. */
export interface View {
  phase: Phase;
  sessionId: string;
  crop: NextCrop | null;
  report: Report | null;
  /** True while the displayed crop is a previously labeled one (undo). */
  relabeling: boolean;
  canUndo: boolean;
  error: string | null;
}

interface PendingLabel {
  boxId: string;
  cls: AuditClass;
}

/**
 * Drives one audit session against the server.
 *
 * The server is the source of truth: every advance re-reads /next and the
 * report endpoint. The only client-side memory is the last labeled crop,
 * kept so U can re-present it for relabeling; labels themselves are never
 * stored here, so a page reload resumes at the server's next unlabeled crop.
 */
export class SessionController {
  private view: View;
  private lastLabeled: NextCrop | null = null;
  private pending: PendingLabel | null = null;
  private busy = false;

  constructor(
    private api: AuditApi,
    sessionId: string,
    private onChange: (view: View) => void,
  ) {
    this.view = {
      phase: "loading",
      sessionId,
      crop: null,
      report: null,
      relabeling: false,
      canUndo: false,
      error: null,
    };
  }

  current(): View {
    return this.view;
  }

  private emit(patch: Partial<View>): void {
    this.view = { ...this.view, ...patch };
    this.onChange(this.view);
  }

  /** Fetch the first crop and the running tallies. */
  async start(): Promise<void> {
    await this.advance();
  }

  /** Label the displayed crop; advances only after the server acknowledges. */
  async label(cls: AuditClass): Promise<void> {
    const crop = this.view.crop;
    if (this.busy || this.view.phase !== "labeling" || crop === null) return;
    this.pending = { boxId: crop.box_id, cls };
    await this.flushPending(crop);
  }

  /** Re-present the previously labeled crop so it can be relabeled. */
  async undo(): Promise<void> {
    if (this.busy || this.view.phase === "loading" || !this.lastLabeled) return;
    const crop = this.lastLabeled;
    this.lastLabeled = null;
    this.emit({
      phase: "labeling",
      crop,
      relabeling: true,
      canUndo: false,
      error: null,
    });
  }

  /** Re-run whatever failed: an unacknowledged label, or the refresh. */
  async retry(): Promise<void> {
    if (this.busy || this.view.phase !== "error") return;
    if (this.pending !== null && this.view.crop !== null) {
      await this.flushPending(this.view.crop);
    } else {
      await this.advance();
    }
  }

  private async flushPending(crop: NextCrop): Promise<void> {
    if (this.pending === null) return;
    this.busy = true;
    try {
      await this.api.submitLabel(
        this.view.sessionId,
        this.pending.boxId,
        this.pending.cls,
      );
    } catch (err) {
      // label not acknowledged: keep it pending so retry can resend
      this.busy = false;
      this.emit({ phase: "error", error: describe(err) });
      return;
    }
    this.pending = null;
    this.lastLabeled = crop;
    this.busy = false;
    await this.advance();
  }

  private async advance(): Promise<void> {
    this.busy = true;
    try {
      const crop = await this.api.nextCrop(this.view.sessionId);
      const report = await this.reportOrNull();
      this.busy = false;
      if (crop === null) {
        this.emit({
          phase: "done",
          crop: null,
          report,
          relabeling: false,
          canUndo: this.lastLabeled !== null,
          error: null,
        });
      } else {
        this.emit({
          phase: "labeling",
          crop,
          report,
          relabeling: false,
          canUndo: this.lastLabeled !== null,
          error: null,
        });
      }
    } catch (err) {
      this.busy = false;
      this.emit({ phase: "error", error: describe(err) });
    }
  }

  private async reportOrNull(): Promise<Report | null> {
    try {
      return await this.api.report(this.view.sessionId);
    } catch (err) {
      // an unlabeled session has no report yet; anything else is real
      if (err instanceof ApiError && err.status === 400) return null;
      throw err;
    }
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return `${err.message} (HTTP ${err.status})`;
  if (err instanceof Error) return err.message;
  return String(err);
}
