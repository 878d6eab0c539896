// Offline-tolerant verdict submission. A verdict that cannot reach the
// service (network down, service restarting) is parked in a durable queue
// and retried on the next flush; duplicate submissions for the same record
// keep only the latest verdict, matching the service's replace semantics.

import { ReviewClient, Verdict } from "./api.js";

export interface QueuedVerdict {
  recordId: string;
  verdict: Verdict;
  author: string;
}

export interface QueueStorage {
  load(): QueuedVerdict[];
  save(items: QueuedVerdict[]): void;
}

export class MemoryStorage implements QueueStorage {
  private items: QueuedVerdict[] = [];
  load() {
    return [...this.items];
  }
  save(items: QueuedVerdict[]) {
    this.items = [...items];
  }
}

export class LocalStorageQueue implements QueueStorage {
  constructor(private key = "bodyfit.verdict-queue") {}
  load(): QueuedVerdict[] {
    const raw = window.localStorage.getItem(this.key);
    return raw ? JSON.parse(raw) : [];
  }
  save(items: QueuedVerdict[]) {
    window.localStorage.setItem(this.key, JSON.stringify(items));
  }
}

export class VerdictQueue {
  constructor(
    private client: ReviewClient,
    private storage: QueueStorage = new MemoryStorage(),
  ) {}

  get pendingCount(): number {
    return this.storage.load().length;
  }

  private park(item: QueuedVerdict) {
    const items = this.storage.load().filter((q) => q.recordId !== item.recordId);
    items.push(item);
    this.storage.save(items);
  }

  /** Submit a verdict; returns true if delivered now, false if queued. */
  async submit(recordId: string, verdict: Verdict, author: string): Promise<boolean> {
    try {
      await this.client.postVerdict(recordId, verdict, author);
      return true;
    } catch {
      this.park({ recordId, verdict, author });
      return false;
    }
  }

  /** Retry everything parked; returns the number delivered. */
  async flush(): Promise<number> {
    const items = this.storage.load();
    const remaining: QueuedVerdict[] = [];
    let delivered = 0;
    for (const item of items) {
      try {
        await this.client.postVerdict(item.recordId, item.verdict, item.author);
        delivered++;
      } catch {
        remaining.push(item);
      }
    }
    this.storage.save(remaining);
    return delivered;
  }
}
